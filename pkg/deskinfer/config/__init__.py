"""
Configuration package for deskinfer.
"""

from .config_manager import ConfigManager

__all__ = ['ConfigManager']
