from .core import BaseUI
from .results_ui import ResultsUI
from .menu_ui import MainUI

__all__ = ['BaseUI', 'ResultsUI', 'MainUI']
