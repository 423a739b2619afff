"""Accuracy grids over the filtered test sets, trend checks and reports."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataio import Manifest
from .imgfreq import FilterKind
from .nnet.train import Checkpoint, evaluate_model

CellKey = tuple[FilterKind, float, int]

DEFAULT_SIGMAS = (0.5, 1.0, 1.5)
DEFAULT_WIDTHS = (2, 3, 4, 5, 6, 7)
KIND_ORDER = (FilterKind.HIGH, FilterKind.LOW)

REFERENCE_TABLES = {
    "cifar10_baseline": "reference_cifar10_baseline.csv",
    "cifar10_stochastic": "reference_cifar10_stochastic.csv",
    "tinyimagenet_baseline": "reference_tinyimagenet_baseline.csv",
    "tinyimagenet_stochastic": "reference_tinyimagenet_stochastic.csv",
}


class MissingCellError(FileNotFoundError):
    def __init__(self, key: CellKey, path):
        kind, sigma, width = key
        super().__init__(f"missing test set for cell ({kind.value}, sigma={sigma:g}, width={width}): {path}")
        self.key = key


def cell_key(kind, sigma, width) -> CellKey:
    return FilterKind.parse(kind), float(sigma), int(width)


def _sort_key(key: CellKey):
    return KIND_ORDER.index(key[0]), key[1], key[2]


@dataclass
class AccuracyGrid:
    clean_accuracy: float
    cells: dict[CellKey, float]
    model_id: str = ""
    dataset_id: str = ""

    def __post_init__(self):
        self.cells = {cell_key(*k): float(v) for k, v in self.cells.items()}
        for k, v in [("clean", self.clean_accuracy), *self.cells.items()]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy for {k} is {v}, outside [0, 1]")

    def __getitem__(self, key) -> float:
        return self.cells[cell_key(*key)]

    def keys(self) -> list[CellKey]:
        return sorted(self.cells, key=_sort_key)

    def axes(self) -> tuple[list[FilterKind], list[float], list[int]]:
        kinds = [k for k in KIND_ORDER if any(c[0] is k for c in self.cells)]
        sigmas = sorted({c[1] for c in self.cells})
        widths = sorted({c[2] for c in self.cells})
        return kinds, sigmas, widths

    def is_complete(self) -> bool:
        kinds, sigmas, widths = self.axes()
        return bool(self.cells) and len(self.cells) == len(kinds) * len(sigmas) * len(widths)

    def is_default(self) -> bool:
        kinds, sigmas, widths = self.axes()
        return (
            self.is_complete()
            and kinds == list(KIND_ORDER)
            and sigmas == list(DEFAULT_SIGMAS)
            and widths == list(DEFAULT_WIDTHS)
        )

    def mean_accuracy(self, kind: FilterKind | None = None) -> float:
        vals = [v for k, v in self.cells.items() if kind is None or k[0] is kind]
        return float(np.mean(vals))


@dataclass
class GridComparison:
    baseline: AccuracyGrid
    treated: AccuracyGrid
    deltas: dict[CellKey, float] = field(init=False)

    def __post_init__(self):
        if set(self.baseline.cells) != set(self.treated.cells):
            raise ValueError("grids do not share the same cell keys")
        self.deltas = {k: self.treated.cells[k] - self.baseline.cells[k] for k in self.baseline.keys()}

    @property
    def clean_delta(self) -> float:
        return self.treated.clean_accuracy - self.baseline.clean_accuracy

    def mean_delta(self, kind: FilterKind | None = None) -> float:
        vals = [v for k, v in self.deltas.items() if kind is None or k[0] is kind]
        return float(np.mean(vals))

    def worst_cell(self) -> tuple[CellKey, float]:
        key = min(self.baseline.keys(), key=lambda k: self.deltas[k])
        return key, self.deltas[key]

    def summary(self) -> dict[str, float | str]:
        (kind, sigma, width), worst = self.worst_cell()
        return {
            "clean_delta": self.clean_delta,
            "mean_delta": self.mean_delta(),
            "mean_delta_HighPass": self.mean_delta(FilterKind.HIGH),
            "mean_delta_LowPass": self.mean_delta(FilterKind.LOW),
            "worst_cell": f"{kind.value}/{sigma:g}/{width}",
            "worst_delta": worst,
        }


def compare(baseline: AccuracyGrid, treated: AccuracyGrid) -> GridComparison:
    return GridComparison(baseline, treated)


# ---------------------------------------------------------------------------
# evaluation


def run_grid(checkpoint: Checkpoint, manifest: Manifest, batch_size: int = 500, threads: int = 1) -> AccuracyGrid:
    """Evaluate ``checkpoint`` once on the clean set and on every grid cell."""
    if manifest.clean is None:
        raise ValueError("manifest lists no clean test set")
    for entry in manifest.cells:
        if not entry.path.is_file():
            raise MissingCellError((entry.spec.kind, entry.spec.sigma, entry.spec.width), entry.path)
    if not manifest.clean.path.is_file():
        raise FileNotFoundError(f"missing clean test set: {manifest.clean.path}")
    if manifest.num_classes != checkpoint.num_classes:
        raise ValueError(
            f"manifest has {manifest.num_classes} classes, checkpoint has {checkpoint.num_classes}"
        )
    model = checkpoint.model()

    def score(entry) -> float:
        # layers keep per-call caches, so each worker needs its own model
        net = model if threads <= 1 else checkpoint.model()
        return evaluate_model(net, manifest.load(entry), checkpoint.mean, checkpoint.std, batch_size)

    entries = [manifest.clean, *manifest.cells]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        accs = list(pool.map(score, entries))
    cells = {(e.spec.kind, e.spec.sigma, e.spec.width): a for e, a in zip(manifest.cells, accs[1:])}
    return AccuracyGrid(accs[0], cells, model_id=checkpoint.config_hash.hex()[:12])


# ---------------------------------------------------------------------------
# trend checks


class TrendCheck(NamedTuple):
    name: str
    passed: bool
    details: str


def trend_checks(grid: AccuracyGrid, slack: float = 2.0) -> list[TrendCheck]:
    """Monotone-trend predicates over the default grid, in accuracy points with ``slack``.

    a. high-pass, each sigma: width 7 <= width 2 + slack
    b. high-pass, each width >= 3: sigma 0.5 <= sigma 1.5 + slack
    c. low-pass, each width: sigma 1.5 <= sigma 0.5 + slack
    d. clean >= every high-pass cell with width >= 3, minus slack
    """
    if not grid.is_default():
        raise ValueError("trend checks need the full 2 x 3 x 6 default grid")
    hp, lp = FilterKind.HIGH, FilterKind.LOW

    def pts(kind, sigma, width):
        return 100.0 * grid[(kind, sigma, width)]

    def collect(name, pairs):
        # pairs: (label, lhs, rhs) with the predicate lhs <= rhs + slack
        bad = [f"{label}: {lhs:.2f} > {rhs:.2f} + {slack:g}" for label, lhs, rhs in pairs if lhs > rhs + slack]
        return TrendCheck(name, not bad, "; ".join(bad) if bad else f"{len(pairs)} comparisons hold")

    clean = 100.0 * grid.clean_accuracy
    return [
        collect(
            "highpass_width",
            [(f"sigma={s:g}", pts(hp, s, 7), pts(hp, s, 2)) for s in DEFAULT_SIGMAS],
        ),
        collect(
            "highpass_sigma",
            [(f"width={w}", pts(hp, 0.5, w), pts(hp, 1.5, w)) for w in DEFAULT_WIDTHS if w >= 3],
        ),
        collect(
            "lowpass_sigma",
            [(f"width={w}", pts(lp, 1.5, w), pts(lp, 0.5, w)) for w in DEFAULT_WIDTHS],
        ),
        collect(
            "clean_above_highpass",
            [
                (f"sigma={s:g},width={w}", pts(hp, s, w), clean)
                for s in DEFAULT_SIGMAS
                for w in DEFAULT_WIDTHS
                if w >= 3
            ],
        ),
    ]


# ---------------------------------------------------------------------------
# reports


def _pct(v: float) -> str:
    return f"{100.0 * v:.2f}"


def _signed_pct(v: float) -> str:
    s = f"{100.0 * v:+.2f}"
    return "+0.00" if s == "-0.00" else s


def emit_report(obj: AccuracyGrid | GridComparison, fmt: str = "csv") -> str:
    """Render a grid or comparison as ``csv`` or ``markdown`` (percent, 2 decimals)."""
    grid = obj.treated if isinstance(obj, GridComparison) else obj
    if not grid.is_complete():
        raise ValueError("report needs a complete grid (full kind x sigma x width cross product)")
    if fmt == "csv":
        return _emit_csv(obj)
    if fmt in ("markdown", "md"):
        return _emit_markdown(obj)
    raise ValueError(f"unknown report format {fmt!r}; use csv or markdown")


def _emit_csv(obj) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(obj, GridComparison):
        w.writerow(["kind", "sigma", "width", "accuracy", "delta"])
        w.writerow(["Clean", "", "", _pct(obj.treated.clean_accuracy), _signed_pct(obj.clean_delta)])
        for k in obj.treated.keys():
            w.writerow([k[0].value, f"{k[1]:g}", k[2], _pct(obj.treated.cells[k]), _signed_pct(obj.deltas[k])])
    else:
        w.writerow(["kind", "sigma", "width", "accuracy"])
        w.writerow(["Clean", "", "", _pct(obj.clean_accuracy)])
        for k in obj.keys():
            w.writerow([k[0].value, f"{k[1]:g}", k[2], _pct(obj.cells[k])])
    return buf.getvalue()


def _emit_markdown(obj) -> str:
    comp = obj if isinstance(obj, GridComparison) else None
    grid = comp.treated if comp else obj
    kinds, sigmas, widths = grid.axes()

    def cell(key):
        text = _pct(grid.cells[key])
        return f"{text} ({_signed_pct(comp.deltas[key])})" if comp else text

    clean = _pct(grid.clean_accuracy)
    if comp:
        clean += f" ({_signed_pct(comp.clean_delta)} vs baseline {_pct(comp.baseline.clean_accuracy)})"
    out = [f"Clean test accuracy: {clean}", ""]
    for kind in kinds:
        out.append(f"### {kind.value}")
        out.append("")
        out.append("| Sigma | " + " | ".join(str(w) for w in widths) + " |")
        out.append("|---" * (len(widths) + 1) + "|")
        for s in sigmas:
            out.append(f"| {s:g} | " + " | ".join(cell((kind, s, w)) for w in widths) + " |")
        out.append("")
    if comp:
        summ = comp.summary()
        out.append(
            "Mean delta: {:+.2f} (HighPass {:+.2f}, LowPass {:+.2f}); worst cell {} at {:+.2f}".format(
                100 * summ["mean_delta"],
                100 * summ["mean_delta_HighPass"],
                100 * summ["mean_delta_LowPass"],
                summ["worst_cell"],
                100 * summ["worst_delta"],
            )
        )
        out.append("")
    return "\n".join(out)


def parse_report_csv(text: str) -> AccuracyGrid | GridComparison:
    """Inverse of the CSV form of :func:`emit_report`; ``#`` lines are comments."""
    rows = list(csv.DictReader(line for line in text.splitlines() if line and not line.startswith("#")))
    if not rows:
        raise ValueError("report has no rows")
    has_delta = "delta" in rows[0]
    clean, clean_delta, cells, deltas = None, 0.0, {}, {}
    for r in rows:
        acc = float(r["accuracy"]) / 100.0
        d = float(r["delta"]) / 100.0 if has_delta else 0.0
        if r["kind"] == "Clean":
            clean, clean_delta = acc, d
        else:
            key = cell_key(r["kind"], r["sigma"], r["width"])
            cells[key], deltas[key] = acc, d
    if clean is None:
        raise ValueError("report lacks the Clean row")
    treated = AccuracyGrid(clean, cells)
    if not has_delta:
        return treated
    baseline = AccuracyGrid(
        round(clean - clean_delta, 6), {k: round(v - deltas[k], 6) for k, v in cells.items()}
    )
    return GridComparison(baseline, treated)


def read_grid_csv(path: str | Path) -> AccuracyGrid:
    parsed = parse_report_csv(Path(path).read_text())
    return parsed.treated if isinstance(parsed, GridComparison) else parsed


def load_reference(name: str) -> AccuracyGrid:
    """Bundled published accuracy tables, e.g. ``"cifar10_baseline"``."""
    try:
        fname = REFERENCE_TABLES[name]
    except KeyError:
        raise ValueError(f"unknown reference table {name!r}; choose from {sorted(REFERENCE_TABLES)}") from None
    text = resources.files("freqrobust").joinpath("data", fname).read_text()
    grid = parse_report_csv(text)
    grid.model_id, grid.dataset_id = "reference", name
    return grid
