"""Append-only JSONL run log: who ran what, on which environment, producing
which artifacts (by content hash)."""

from __future__ import annotations

import json
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch


def environment_fingerprint() -> dict:
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "torch_threads": torch.get_num_threads(),
    }


@dataclass
class RunRecord:
    run_id: str
    stage: str
    seed: int
    config: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)  # name -> sha256
    metrics: dict = field(default_factory=dict)
    environment: dict = field(default_factory=environment_fingerprint)
    timestamp: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat())


def append_record(path: str | Path, record: RunRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[dict]:
    records = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
