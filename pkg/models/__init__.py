from .dataio import Dataset, ExperimentKind, Slice
from .architectures import Architecture, EncoderFamily, ModelConfig, SegmentationModel
from .metrics import MetricsRecord
from .training import TrainConfig

__all__ = ['Dataset', 'ExperimentKind', 'Slice', 'Architecture', 'EncoderFamily', 'ModelConfig',
           'SegmentationModel', 'MetricsRecord', 'TrainConfig']
