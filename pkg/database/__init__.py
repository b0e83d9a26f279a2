from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .operations import RunManifest, RunStore

__all__ = [
    'Checkpoint',
    'read_checkpoint',
    'write_checkpoint',
    'RunManifest',
    'RunStore'
]
