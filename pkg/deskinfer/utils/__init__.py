"""
Utilities package for deskinfer.
"""

from .logger import LoggerSetup

__all__ = ['LoggerSetup']
