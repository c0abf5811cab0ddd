"""Command-line harness: ``pbbvi --experiment <name> [options]``.

Each run writes one result: with ``--format json-lines`` a header line
(``"type": "record"``: experiment, config echo, metrics, wall time,
version) followed by one ``"type": "row"`` line per table row; with
``--format csv`` the rows go to the CSV file (header row first) and the
record goes to ``<out>.meta.json`` next to it.  Without ``--out`` the
json-lines stream is printed to stdout.

Feeding a record's ``config`` back through :func:`run` reproduces its rows
exactly.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .inference import InferenceConfig
from .models import Dataset
from .regularizers import RegularizerSpec, alpha, kl, perturbative

__all__ = ["RunConfig", "ResultRecord", "load_csv", "split", "run", "write_record", "main", "EXPERIMENTS"]

EXPERIMENTS = ("fit-1d", "gp-reg-synth", "gp-class", "variance-scaling", "divergence-check", "convergence-race")
METHODS = ("kl", "alpha", "perturbative")
FORMATS = ("csv", "json-lines")

_DEFAULTS = {
    "fit-1d": ex.FIT_1D_DEFAULTS,
    "gp-reg-synth": ex.GP_REG_DEFAULTS,
    "gp-class": ex.GP_CLASS_DEFAULTS,
    "variance-scaling": ex.SCALING_DEFAULTS,
    "divergence-check": InferenceConfig(S=100_000, T=1),
    "convergence-race": ex.RACE_DEFAULTS,
}

split = ex.split


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    method: str = "perturbative"
    order: int = 3
    alpha: float = 0.5
    samples: int | None = None
    iters: int | None = None
    lr: float | None = None
    lr_decay: float | None = None
    seed: int = 0
    data: str | None = None
    label_column: str | None = None
    split_seed: int = 0
    out: str | None = None
    format: str = "json-lines"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.format not in FORMATS:
            raise ValueError(f"unknown format {self.format!r}; choose from {FORMATS}")
        self.spec()  # validates order / alpha for the chosen method
        if self.experiment in ("gp-class", "convergence-race") and not self.data:
            raise ValueError(f"experiment {self.experiment} needs --data")

    def spec(self) -> RegularizerSpec:
        if self.method == "kl":
            return kl()
        if self.method == "alpha":
            return alpha(self.alpha)
        return perturbative(self.order)

    def inference_config(self) -> InferenceConfig:
        base = _DEFAULTS[self.experiment]
        changes = {"regularizer": self.spec(), "seed": self.seed}
        for name, attr in (("samples", "S"), ("iters", "T"), ("lr", "lr0"), ("lr_decay", "lr_decay")):
            value = getattr(self, name)
            if value is not None:
                changes[attr] = value
        return replace(base, **changes)

    def echo(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ResultRecord:
    experiment: str
    config: dict
    rows: list[dict]
    metrics: dict
    wall_time: float
    version: str = __version__
    columns: list[str] = field(default_factory=list)


# -- data ingestion ---------------------------------------------------------


def load_csv(path, label_column: str | int | None = None, standardize: bool = False) -> Dataset:
    """Read a numeric CSV with a header row.

    ``label_column`` is a header name or a 0-based index (default: last
    column).  Labels may be any two distinct values; they are mapped to 0/1
    in sorted order (numerically if all labels parse as numbers).  With
    ``standardize`` every feature column is scaled to zero mean and unit
    variance over the whole file; constant columns become 0.  (Experiments
    standardize after splitting, with training-split statistics.)
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        records = [row for row in reader if row and any(c.strip() for c in row)]
    if label_column is None:
        li = len(header) - 1
    elif isinstance(label_column, int) or str(label_column).lstrip("-").isdigit():
        li = int(label_column) % len(header)
    elif label_column in header:
        li = header.index(label_column)
    else:
        raise ValueError(f"{path}: label column {label_column!r} not in header {header}")
    X, raw_labels = [], []
    for r, row in enumerate(records, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        feats = []
        for c, cell in enumerate(row):
            if c == li:
                raw_labels.append(cell.strip())
                continue
            try:
                feats.append(float(cell))
            except ValueError:
                raise ValueError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c} ({header[c]})") from None
        X.append(feats)
    y = _map_labels(raw_labels, path)
    X = np.array(X, dtype=float).reshape(len(records), len(header) - 1)
    if standardize:
        mu, sd = X.mean(0), X.std(0)
        X = np.where(sd > 0, (X - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    return Dataset(X, y)


def _map_labels(raw: list[str], path) -> np.ndarray:
    values = sorted(set(raw))
    try:
        numeric = sorted({float(v) for v in raw})
        values_num = True
    except ValueError:
        values_num = False
    if values_num:
        if len(numeric) > 2:
            raise ValueError(f"{path}: labels are not binary (found {len(numeric)} distinct values)")
        if set(numeric) <= {0.0, 1.0}:
            return np.array([float(v) for v in raw])
        return np.array([float(float(v) == numeric[-1]) for v in raw])
    if len(values) > 2:
        raise ValueError(f"{path}: labels are not binary (found {values[:5]}...)")
    return np.array([float(v == values[-1]) for v in raw])


# -- running ----------------------------------------------------------------


def run(config: RunConfig) -> ResultRecord:
    """Execute one experiment and, if ``config.out`` is set, write it to disk."""
    t0 = time.perf_counter()
    spec = config.spec()
    icfg = config.inference_config()
    if config.experiment == "fit-1d":
        result = ex.fit_1d(spec, icfg)
    elif config.experiment == "gp-reg-synth":
        result = ex.gp_reg_synth(spec, icfg)
    elif config.experiment == "divergence-check":
        result = ex.divergence_check(spec, n_samples=icfg.S, seed=config.seed)
    elif config.experiment == "variance-scaling":
        result = ex.variance_scaling(config=icfg, seeds=(config.seed,))
    else:
        data = load_csv(config.data, config.label_column)
        if config.experiment == "gp-class":
            result = ex.gp_class(data, spec, icfg, config.split_seed)
        else:
            result = ex.convergence_race(data, icfg, config.split_seed, contender=spec)
    record = ResultRecord(
        config.experiment,
        config.echo(),
        [_plain(r) for r in result.rows],
        _plain(result.metrics),
        time.perf_counter() - t0,
    )
    record.columns = list(dict.fromkeys(k for r in record.rows for k in r))
    if config.out:
        write_record(record, config.out, config.format)
    return record


def _plain(x):
    """Convert numpy scalars/arrays to JSON-serializable Python values."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


def _header(record: ResultRecord) -> dict:
    return {
        "type": "record",
        "experiment": record.experiment,
        "config": record.config,
        "metrics": record.metrics,
        "wall_time": record.wall_time,
        "version": record.version,
        "columns": record.columns,
    }


def write_record(record: ResultRecord, out, fmt: str = "json-lines") -> None:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json-lines":
        with out.open("w") as fh:
            fh.write(json.dumps(_header(record)) + "\n")
            for row in record.rows:
                fh.write(json.dumps({"type": "row", **row}) + "\n")
    elif fmt == "csv":
        with out.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=record.columns)
            writer.writeheader()
            writer.writerows(record.rows)
        meta = out.with_name(out.name + ".meta.json")
        meta.write_text(json.dumps(_header(record), indent=2) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pbbvi", description=__doc__.split("\n\n")[0])
    p.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    p.add_argument("--method", default="perturbative", choices=METHODS)
    p.add_argument("--order", type=int, default=3, help="perturbative order K (odd)")
    p.add_argument("--alpha", type=float, default=0.5, help="alpha for --method alpha")
    p.add_argument("--samples", type=int, help="Monte-Carlo samples per step (S)")
    p.add_argument("--iters", type=int, help="iterations (T)")
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--lr-decay", type=float, help="schedule constant tau; 'inf' for a constant rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", help="CSV file for gp-class / convergence-race")
    p.add_argument("--label-column", help="label column name or 0-based index (default: last)")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", help="output path (default: json-lines on stdout)")
    p.add_argument("--format", default="json-lines", choices=FORMATS)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and jitter warnings")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    fields = {k: v for k, v in vars(args).items() if k != "verbose"}
    try:
        config = RunConfig(**fields)
        record = run(config)
    except Exception as exc:  # report any failure as a structured message
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    if not config.out:
        sys.stdout.write(json.dumps(_header(record)) + "\n")
        for row in record.rows:
            sys.stdout.write(json.dumps({"type": "row", **row}) + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
