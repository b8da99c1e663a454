"""
Result storage management for fracbayes
Handles JSON configs and the CSV, plot and manifest artifacts of a run
"""

import csv
import io
import json
import logging
import os
from typing import Any, Dict, Iterable, List, Sequence

import aiofiles

from config import OUTPUT_DIR
from fracbayes.exceptions import ConfigError
from fracbayes.utils import format_float

logger = logging.getLogger(__name__)


class ResultStorage:
    """Manages experiment artifacts under one output directory"""

    def __init__(self, output_dir: str = OUTPUT_DIR):
        self.output_dir = output_dir
        self.plots_dir = os.path.join(output_dir, "plots")

    def for_directory(self, output_dir: str) -> "ResultStorage":
        """Storage rooted at another output directory"""
        return ResultStorage(output_dir)

    def _ensure_dirs(self):
        """Create output directories if they don't exist"""
        os.makedirs(self.output_dir, exist_ok=True)
        os.makedirs(self.plots_dir, exist_ok=True)

    def _read_json(self, file_path: str) -> Dict[str, Any]:
        """Read JSON data from file"""
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (FileNotFoundError, json.JSONDecodeError) as e:
            logger.error(f"Error reading {file_path}: {e}")
            raise ConfigError(f"cannot read configuration {file_path}: {e}") from e

    def read_config(self, file_path: str) -> Dict[str, Any]:
        """Load a JSON configuration document; it must be an object"""
        data = self._read_json(file_path)
        if not isinstance(data, dict):
            raise ConfigError(f"{file_path}: top level must be a JSON object")
        return data

    @staticmethod
    def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        """Render rows as CSV text with exact float formatting"""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])
        return buffer.getvalue()

    async def _write_text(self, file_path: str, text: str):
        """Write text asynchronously"""
        try:
            async with aiofiles.open(file_path, 'w', encoding='utf-8') as f:
                await f.write(text)
        except Exception as e:
            logger.error(f"Error writing {file_path}: {e}")
            raise

    async def write_table(self, name: str, header: Sequence[str],
                          rows: Iterable[Sequence[Any]]) -> str:
        """Write a CSV table and return its path"""
        self._ensure_dirs()
        file_path = os.path.join(self.output_dir, name)
        await self._write_text(file_path, self.render_csv(header, rows))
        logger.info(f"Table written: {file_path}")
        return file_path

    async def write_json_async(self, name: str, data: Dict[str, Any]) -> str:
        """Write a JSON artifact (diagnostics, manifest) and return its path"""
        self._ensure_dirs()
        file_path = os.path.join(self.output_dir, name)
        await self._write_text(file_path, json.dumps(data, indent=2, sort_keys=True) + "\n")
        return file_path

    async def write_plot_series(self, statistic: str,
                                series: List[Sequence[float]]) -> str:
        """Write a whitespace-separated x/y series under plots/"""
        self._ensure_dirs()
        safe_name = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in statistic)
        file_path = os.path.join(self.plots_dir, f"{safe_name}.txt")
        lines = [" ".join(format_float(v) for v in point) for point in series]
        await self._write_text(file_path, "\n".join(lines) + ("\n" if lines else ""))
        return file_path

    async def write_events(self, jsonl: str, name: str) -> str:
        """Write the run log as JSON lines"""
        self._ensure_dirs()
        file_path = os.path.join(self.output_dir, name)
        await self._write_text(file_path, jsonl)
        return file_path


def _cell(value: Any) -> str:
    """One CSV cell; floats use exact text"""
    if isinstance(value, bool) or value is None:
        return "" if value is None else str(value).lower()
    if isinstance(value, (int, str)):
        return str(value)
    try:
        return format_float(float(value))
    except (TypeError, ValueError):
        return str(value)


# Global storage instance
storage = ResultStorage()
