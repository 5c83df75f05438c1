"""
Result Report Generation
JSON and CSV artifacts with a reproducibility header, plus tabulated text for the terminal
"""
import csv
import json
import logging
import math
from dataclasses import asdict, is_dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tabulate import tabulate

from config_manager import TOOL_NAME, TOOL_VERSION, ConfigFile

logger = logging.getLogger(__name__)


def point_label(p) -> str:
    """(1, -2) -> "1,-2" for keys and CSV cells; nested keys join with "|" """
    if any(isinstance(c, tuple) for c in p):
        return "|".join(point_label(c) if isinstance(c, tuple) else str(c) for c in p)
    return ",".join(str(int(c)) for c in p)


def to_jsonable(value):
    """Convert results (dataclasses, numpy values, tuple keys, enums) into JSON types"""
    if is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(asdict(value))
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {(point_label(k) if isinstance(k, tuple) else str(k)): to_jsonable(v)
                for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


class ReportGenerator:
    """Writes the artifacts of one command run"""

    def __init__(self, config_file: ConfigFile, command: str, output_dir=".", seed: Optional[int] = None,
                 options: Optional[Dict[str, Any]] = None):
        self.config_file = config_file
        self.command = command
        self.output_dir = Path(output_dir)
        self.seed = seed
        self.options = dict(options or {})  # command flags as resolved for this run

    def header(self) -> Dict[str, Any]:
        """Resolved config, command flags, tool version and seed; enough to re-run the command"""
        return {
            'tool': TOOL_NAME,
            'version': TOOL_VERSION,
            'command': self.command,
            'seed': self.seed,
            'options': to_jsonable(self.options),
            'config': self.config_file.resolved(),
        }

    def _path(self, filename: str) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return self.output_dir / filename

    def write_json(self, filename: str, payload: Dict[str, Any]) -> Path:
        """JSON object with a "header" key followed by the payload"""
        path = self._path(filename)
        document = {'header': self.header()}
        document.update(to_jsonable(payload))
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(document, f, indent=2, sort_keys=False)
            f.write("\n")
        logger.info("JSON report saved to: %s", path)
        return path

    def write_csv(self, filename: str, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
        """CSV preceded by "# " comment lines carrying the header"""
        path = self._path(filename)
        with open(path, 'w', newline='', encoding='utf-8') as csvfile:
            for line in json.dumps(self.header(), indent=2).splitlines():
                csvfile.write(f"# {line}\n")
            writer = csv.writer(csvfile)
            writer.writerow(columns)
            count = 0
            for row in rows:
                writer.writerow([_csv_cell(v) for v in row])
                count += 1
        logger.info("CSV report saved to: %s (%d rows)", path, count)
        return path

    def generate_text_report(self, title: str, sections: List[Tuple[str, Sequence[str], List[Sequence]]]) -> str:
        """Terminal report: one tabulated block per (heading, headers, rows) section"""
        lines = ["=" * 80, f"{title.upper()}"]
        config = self.config_file.config
        lines.append(f"Config: {self.config_file.path or '<inline>'} (d={config.dim}, N={config.N})")
        lines.append("=" * 80)
        for heading, headers, rows in sections:
            lines.append("")
            lines.append(heading)
            lines.append("-" * 80)
            if rows:
                lines.append(tabulate(rows, headers=list(headers), tablefmt="simple", floatfmt=".10g"))
            else:
                lines.append("(none)")
        lines.append("")
        lines.append("=" * 80)
        lines.append(f"Report generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        lines.append("=" * 80)
        return "\n".join(lines)


def _csv_cell(value):
    if isinstance(value, tuple):
        return point_label(value)
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_csv_header(path) -> Dict[str, Any]:
    """Recover the header block from a CSV written by write_csv"""
    lines = []
    with open(path, encoding='utf-8') as f:
        for line in f:
            if not line.startswith("# "):
                break
            lines.append(line[2:])
    return json.loads("".join(lines))
