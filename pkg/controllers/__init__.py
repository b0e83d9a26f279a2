from .dataset import DatasetController
from .benchmark import BenchmarkController
from .report import ReportController

__all__ = [
    'DatasetController',
    'BenchmarkController',
    'ReportController'
]
