# CLI commands module

from . import run_cmd
from . import check_cmd
from . import plot_cmd
from . import sweep_cmd

__all__ = ['run_cmd', 'check_cmd', 'plot_cmd', 'sweep_cmd']
