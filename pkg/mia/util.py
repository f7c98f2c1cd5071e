import logging
import os
import tempfile
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, Optional, Union

import colorlog
import yaml
from concurrent_log_handler import ConcurrentRotatingFileHandler


class AuditErrorCode(IntEnum):
    DEGENERATE_GROUND_TRUTH = 1
    UNIVERSE_MISMATCH = 2
    INSUFFICIENT_INSTANCES = 3
    UNKNOWN_ATTACK = 4
    MISSING_SIGNAL = 5
    INVALID_CONFIG = 6
    PARSE_ERROR = 7
    VALIDATION_FAILED = 8
    NON_CONVERGENCE = 9
    DEGENERATE_SAMPLE = 10
    LENGTH_MISMATCH = 11
    MISSING_FILE = 12


# Codes caused by how the tool was invoked rather than by the data it was given
USAGE_ERROR_CODES = frozenset({AuditErrorCode.INVALID_CONFIG, AuditErrorCode.UNKNOWN_ATTACK})


class AuditError(Exception):
    def __init__(self, code: AuditErrorCode, message: str, details: Optional[Any] = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.details = details

    def to_dict(self) -> Dict:
        return error_dict(self.code, self.message, self.details)


def error_dict(code: AuditErrorCode, message: str, details: Optional[Any] = None) -> Dict:
    error = {"error_code": int(code), "error_name": code.name, "error_message": message}
    if details is not None:
        error["details"] = details
    return error


def load_config(path: Union[str, Path], required: bool = True) -> Dict:
    """
    Loads a YAML (or JSON, which YAML accepts) configuration file. A missing optional file yields ``{}``.
    """
    path = Path(path)
    if not path.exists():
        if required:
            raise AuditError(AuditErrorCode.MISSING_FILE, f"Config file {path} does not exist.")
        return {}
    with open(path) as f:
        try:
            config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, f"Can not parse config file {path}: {e}")
    if config is None:
        return {}
    if not isinstance(config, dict):
        raise AuditError(AuditErrorCode.INVALID_CONFIG, f"Config file {path} must contain a mapping.")
    return config


def initialize_logging(service_name: str, logging_config: Dict, root_path: Path):
    log_path = root_path / logging_config.get("log_filename", "mia-audit.log")
    log_date_format = "%Y-%m-%dT%H:%M:%S"
    file_name_length = 33 - len(service_name)

    logger = logging.getLogger()
    # Re-initializing (tests, repeated cli invocations in one process) must not stack handlers
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    if logging_config.get("log_stdout", True):
        handler = colorlog.StreamHandler()
        handler.setFormatter(
            colorlog.ColoredFormatter(
                f"%(asctime)s.%(msecs)03d {service_name} %(name)-{file_name_length}s: "
                f"%(log_color)s%(levelname)-8s%(reset)s %(message)s",
                datefmt=log_date_format,
                reset=True,
            )
        )
    else:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        maxrotation = logging_config.get("log_maxfilesrotation", 7)
        handler = ConcurrentRotatingFileHandler(log_path, "a", maxBytes=20 * 1024 * 1024, backupCount=maxrotation)
        handler.setFormatter(
            logging.Formatter(
                fmt=f"%(asctime)s.%(msecs)03d {service_name} %(name)-{file_name_length}s: %(levelname)-8s %(message)s",
                datefmt=log_date_format,
            )
        )
    logger.addHandler(handler)

    log_level = logging_config.get("log_level", "INFO")
    if log_level not in ("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"):
        log_level = "INFO"
    logger.setLevel(getattr(logging, log_level))


def write_atomic(path: Union[str, Path], content: Union[str, bytes]):
    """
    Writes ``content`` to a temporary file next to ``path`` and renames it into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(content, bytes) else "w"
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as f:
            f.write(content)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
