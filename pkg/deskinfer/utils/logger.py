#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Logger module for deskinfer.
This module configures process-wide logging for the CLI and long runs.
"""

import os
import logging
import logging.handlers
from typing import Dict, Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class LoggerSetup:
    """Class for setting up application logging."""

    def __init__(self, log_file: Optional[str] = "deskinfer.log", log_level: int = logging.INFO):
        """
        Initialize the logger setup.

        Args:
            log_file: Path to log file, or None for console-only logging
            log_level: Logging level (default: INFO)
        """
        self.log_file = log_file
        self.log_level = log_level
        self.loggers: Dict[str, logging.Logger] = {}

        if log_file:
            log_dir = os.path.dirname(os.path.abspath(log_file))
            if log_dir and not os.path.exists(log_dir):
                os.makedirs(log_dir)

        self.setup_root_logger()

    def setup_root_logger(self) -> None:
        """Configure the root logger."""
        root_logger = logging.getLogger()
        root_logger.setLevel(self.log_level)

        # Remove existing handlers to avoid duplicates
        for handler in root_logger.handlers[:]:
            root_logger.removeHandler(handler)

        formatter = logging.Formatter(LOG_FORMAT)

        if self.log_file:
            file_handler = logging.handlers.RotatingFileHandler(
                self.log_file, maxBytes=10*1024*1024, backupCount=5
            )
            file_handler.setFormatter(formatter)
            file_handler.setLevel(self.log_level)
            root_logger.addHandler(file_handler)

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        console_handler.setLevel(self.log_level)
        root_logger.addHandler(console_handler)

    def get_logger(self, name: str) -> logging.Logger:
        """
        Get a logger with the specified name.

        Args:
            name: Logger name

        Returns:
            Logger instance
        """
        if name not in self.loggers:
            self.loggers[name] = logging.getLogger(name)
        return self.loggers[name]

    @staticmethod
    def get_log_levels() -> Dict[str, int]:
        """
        Get available logging levels.

        Returns:
            Dictionary mapping level names to values
        """
        return {
            'DEBUG': logging.DEBUG,
            'INFO': logging.INFO,
            'WARNING': logging.WARNING,
            'ERROR': logging.ERROR,
            'CRITICAL': logging.CRITICAL
        }

    @classmethod
    def from_level_name(cls, level_name: str, log_file: Optional[str] = "deskinfer.log") -> 'LoggerSetup':
        """Build a setup from a level name such as "INFO"; unknown names fall back to INFO."""
        level = cls.get_log_levels().get(str(level_name).upper(), logging.INFO)
        return cls(log_file=log_file, log_level=level)
