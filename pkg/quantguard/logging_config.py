import json
import logging
from logging import Handler
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Any

import numpy as np

DEFAULT_RECORD_ATTRS = {
    'name', 'msg', 'args', 'levelname', 'levelno', 'pathname', 'filename', 'module',
    'exc_info', 'exc_text', 'stack_info', 'lineno', 'funcName', 'created', 'msecs',
    'relativeCreated', 'thread', 'threadName', 'processName', 'process', 'message',
    'taskName',
}


def _stringify(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    try:
        json.dumps(value)
        return value
    except TypeError:
        return str(value)


class JSONFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        base: dict[str, Any] = {
            'time': self.formatTime(record, datefmt='%Y-%m-%dT%H:%M:%S%z'),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
        }

        extras = {
            key: value
            for key, value in record.__dict__.items()
            if key not in DEFAULT_RECORD_ATTRS and not key.startswith('_')
        }
        for key, value in extras.items():
            base[key] = _stringify(value)

        if record.exc_info:
            base['exc_info'] = self.formatException(record.exc_info)

        return json.dumps(base, ensure_ascii=False)


def _ensure_logs_dir(logs_dir: Path) -> Path:
    logs_dir.mkdir(parents=True, exist_ok=True)
    return logs_dir


def _configure_handler(handler: Handler, level: int) -> Handler:
    handler.setLevel(level)
    handler.setFormatter(JSONFormatter())
    return handler


def _rotating(path: Path, level: int) -> Handler:
    return _configure_handler(
        TimedRotatingFileHandler(filename=str(path), when='midnight', backupCount=7, encoding='utf-8'),
        level,
    )


def setup_logging(level_name: str | None = None, logs_dir: Path | None = None) -> None:
    """Route every ``quantguard.*`` record through the JSON formatter.

    The console and ``quantguard.log`` receive everything; the optimize/verify
    loop additionally gets its own ``cegis.log`` so a run can be followed
    without the verifier and GA chatter.
    """
    from quantguard.settings import load_settings

    settings = load_settings()
    level_name = (level_name or settings.LOG_LEVEL).upper()
    level = getattr(logging, level_name, logging.INFO)
    logs_dir = _ensure_logs_dir(logs_dir or settings.LOGS_DIR)

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(level)

    root.addHandler(_configure_handler(logging.StreamHandler(), level))
    root.addHandler(_rotating(logs_dir / 'quantguard.log', level))

    cegis_logger = logging.getLogger('quantguard.cegis')
    cegis_logger.setLevel(level)
    for handler in list(cegis_logger.handlers):
        if isinstance(handler, TimedRotatingFileHandler):
            cegis_logger.removeHandler(handler)
            handler.close()
    cegis_logger.addHandler(_rotating(logs_dir / 'cegis.log', level))

    logging.getLogger('urllib3').setLevel(logging.WARNING)
