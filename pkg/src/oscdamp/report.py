"""Report emission: canonical JSON (byte-stable modulo the metadata block)
plus CSV side files.  Every number written to CSV also appears in the JSON."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np


def fingerprint(case_text: str, config: dict) -> str:
    h = hashlib.sha256()
    h.update(case_text.encode())
    h.update(json.dumps(config, sort_keys=True, default=_jsonable).encode())
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def write_report(out_dir: str | Path, name: str, config: dict, results: dict,
                 case_text: str, csv_files: dict | None = None) -> Path:
    """Write <name>.json (and CSV side files); returns the JSON path.

    The timestamp lives in an isolated metadata block so reruns with identical
    inputs reproduce byte-identical content outside it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "metadata": {"written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())},
        "fingerprint": fingerprint(case_text, config),
        "config": config,
        "results": results,
    }
    path = out / f"{name}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    for fname, text in (csv_files or {}).items():
        (out / fname).write_text(text)
    return path


def strip_metadata(report_text: str) -> str:
    doc = json.loads(report_text)
    doc.pop("metadata", None)
    return json.dumps(doc, indent=2, sort_keys=True)
