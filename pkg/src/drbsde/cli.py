"""Command-line front end: ``drbsde run <config>`` and ``drbsde validate <config>``.

Exit codes: 0 success, 2 configuration error (nothing written), 3 numeric
failure in at least one cell (all rows still written, failing cells as
error rows).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as cfgmod
from ._accel import numba_enabled

log = logging.getLogger("drbsde")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
LONG_COLUMNS = ("experiment_id", "cell", "estimator", "value", "std_error", "method", "rel_gap",
                "error", "runtime_ms", "seed")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (list, tuple, dict)):
        return json.dumps(x)
    return str(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for pkg in ("artifact", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _run_cells(cfg: dict, cells: list[dict], workers: int):
    """Execute every cell; results come back ordered by cell index."""
    n_pool = max(1, min(workers, len(cells)))
    inner = max(1, workers // n_pool)
    if n_pool == 1:
        return [cfgmod.execute_cell(cfg, k, c, inner) for k, c in enumerate(cells)]
    with ProcessPoolExecutor(max_workers=n_pool) as pool:
        futs = [pool.submit(cfgmod.execute_cell, cfg, k, c, inner) for k, c in enumerate(cells)]
        results = [f.result() for f in futs]
    return sorted(results, key=lambda r: r[0])


def _finite_or_error(row: cfgmod.Row) -> cfgmod.Row:
    if row.error:
        return row
    for name in ("value", "std_error"):
        v = getattr(row, name)
        if v is not None and not math.isfinite(float(v)):
            row.error = f"NumericFailure: {name} is not finite ({v})"
            row.value = row.std_error = None
            break
    return row


def run(config_path: str, output_dir: str | None = None, workers: int = 1, mirror_json: bool = False) -> int:
    try:
        cfg = cfgmod.validate(cfgmod.load(config_path))
    except cfgmod.ConfigError as exc:
        for d in exc.diagnostics:
            print(f"error {d}", file=sys.stderr)
        return EXIT_CONFIG
    raw = Path(config_path).read_bytes()
    exp_id = cfg.get("experiment_id", Path(config_path).stem)
    cells = cfgmod.cells(cfg)
    axes = list(cfg.get("sweep", {}))
    out_dir = Path(output_dir or cfg.get("output_dir") or ".")
    log.info("experiment %s: %d cell(s), %d estimator(s)", exp_id, len(cells), len(cfg["estimators"]))

    results = _run_cells(cfg, cells, max(1, int(workers)))

    long_rows, wide_rows, failures = [], [], []
    for (k, rows, ms, err), coords in zip(results, cells):
        s, _ = cfgmod._cell_config(cfg, coords)
        if err:
            failures.append((k, err))
            log.warning("cell %d %s failed: %s", k, coords, rows[0].error)
        wide = {"experiment_id": exp_id, "cell": k, **coords, "seed": s["seed"], "error": "",
                "runtime_ms": ms}
        for row in map(_finite_or_error, rows):
            long_rows.append({"experiment_id": exp_id, "cell": k, **coords, "estimator": row.estimator,
                              "value": row.value, "std_error": row.std_error, "method": row.method,
                              "rel_gap": row.rel_gap, "error": row.error, "runtime_ms": ms,
                              "seed": s["seed"], "_extra": row.extra})
            wide[row.estimator] = row.value
            wide[f"{row.estimator}_se"] = row.std_error
            if row.error and not wide["error"]:
                wide["error"] = row.error
        wide_rows.append(wide)

    est = list(cfg["estimators"])
    long_cols = ["experiment_id", "cell", *axes, *LONG_COLUMNS[2:]]
    wide_cols = ["experiment_id", "cell", *axes, "seed",
                 *[c for e in est for c in (e, f"{e}_se")], "error", "runtime_ms"]

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "results.csv", long_cols, long_rows)
    _write_csv(out_dir / "results_wide.csv", wide_cols, wide_rows)
    if mirror_json:
        doc = {"experiment_id": exp_id, "columns": long_cols,
               "rows": [{**{c: r.get(c) for c in long_cols}, "extra": r["_extra"]} for r in long_rows]}
        (out_dir / "results.json").write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=False) + "\n",
                                              encoding="utf-8")
    manifest = {
        "experiment_id": exp_id,
        "config_path": str(config_path),
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "seed": cfg["seed"],
        "n_cells": len(cells),
        "failed_cells": [k for k, _ in failures],
        "versions": _versions(),
        "numba_enabled": numba_enabled(),
        "workers": int(workers),
        "outputs": ["results.csv", "results_wide.csv"] + (["results.json"] if mirror_json else []),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    log.info("wrote %s", out_dir)
    if failures:
        print(f"{len(failures)} of {len(cells)} cell(s) failed; see the error column", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _write_csv(path: Path, cols, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def validate(config_path: str) -> int:
    try:
        cfg = cfgmod.load(config_path)
    except cfgmod.ConfigError as exc:
        for d in exc.diagnostics:
            print(f"error {d}")
        return EXIT_CONFIG
    diags = cfgmod.check(cfg)
    if diags:
        for d in diags:
            print(f"error {d}")
        return EXIT_CONFIG
    print("OK")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")
    p = argparse.ArgumentParser(prog="drbsde", description="Run or validate experiment configs for the BSDE sensitivity estimators.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="execute every sweep cell of a config")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
    r.add_argument("--output-dir", default=None, help="directory for results and manifest")
    r.add_argument("--json", action="store_true", help="also write results.json")
    v = sub.add_parser("validate", parents=[common], help="check a config without running it")
    v.add_argument("config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "validate":
        return validate(args.config)
    if args.workers < 1:
        print("error [invalid-value] --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.config, args.output_dir, args.workers, args.json)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
