"""
Run logging system for numerical event monitoring
Collects cell errors, estimator flags and numerical warnings for one run
"""

import json
import logging
import threading
from datetime import datetime
from typing import Any, Dict, List, Optional

from config import ENABLE_RUN_LOG

logger = logging.getLogger(__name__)


class RunLogger:
    """Keeps an in-memory audit trail of numerical events and mirrors it to logging"""

    def __init__(self):
        self.enabled = ENABLE_RUN_LOG
        self._events: List[Dict[str, Any]] = []
        self._lock = threading.Lock()

    def _record(self, kind: str, level: int, message: str, **fields: Any):
        """Store one event and echo it through the standard logger"""
        logger.log(level, f"{kind}: {message}")
        if not self.enabled:
            return

        event = {
            "time": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            "kind": kind,
            "message": message,
        }
        event.update({key: _jsonable(value) for key, value in fields.items()})

        with self._lock:
            self._events.append(event)

    def log_cell_error(self, experiment: str, cell: tuple, seed: int, error: Exception):
        """Log a failed experiment cell"""
        self._record(
            "cell_error", logging.ERROR,
            f"{experiment} cell {cell} failed: {type(error).__name__}: {error}",
            experiment=experiment, cell=list(cell), seed=seed, error=type(error).__name__,
        )

    def log_estimator_flag(self, estimator: str, reason: str, **fields: Any):
        """Log an estimator whose output needs care (low ESS, censored mass)"""
        self._record("estimator_flag", logging.WARNING, f"{estimator}: {reason}",
                     estimator=estimator, **fields)

    def log_numerical_warning(self, source: str, message: str, **fields: Any):
        """Log a numerical degradation (jitter escalation, clamped eigenvalues)"""
        self._record("numerical_warning", logging.WARNING, f"{source}: {message}",
                     source=source, **fields)

    def log_run_event(self, message: str, **fields: Any):
        """Log a run milestone"""
        self._record("run_event", logging.INFO, message, **fields)

    def events(self, kind: Optional[str] = None) -> List[Dict[str, Any]]:
        """Snapshot of recorded events, optionally filtered by kind"""
        with self._lock:
            snapshot = list(self._events)
        if kind is None:
            return snapshot
        return [event for event in snapshot if event["kind"] == kind]

    def drain(self) -> List[Dict[str, Any]]:
        """Return all recorded events and start a fresh trail"""
        with self._lock:
            snapshot, self._events = self._events, []
        return snapshot

    def to_jsonl(self, events: Optional[List[Dict[str, Any]]] = None) -> str:
        """Render events as JSON lines"""
        events = self.events() if events is None else events
        return "".join(json.dumps(event, sort_keys=True) + "\n" for event in events)


def _jsonable(value: Any) -> Any:
    """Coerce numpy scalars and tuples into plain JSON values"""
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item") and callable(value.item):
        try:
            return value.item()
        except (TypeError, ValueError):
            return str(value)
    return value


# Global run logger instance
run_logger = RunLogger()
