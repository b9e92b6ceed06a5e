"""Multi-seed campaigns, record files, summary tables and plot data."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import scipy

from .algorithms import ALGORITHMS, BleaqConfig, RunRecord
from .core import UsageError
from .problems import SmdDims, catalog, registry_lookup

RECORD_FORMAT = "bilevel-record"
RECORD_VERSION = 1
MANIFEST_NAME = "manifest.json"
OUT_ENV = "BILEVEL_OUT"
DEFAULT_OUT = "bilevel-out"

LARGE = "Large"  # reference algorithm failed, as the published tables print it
UNDEFINED = "undefined"  # zero reference total
FAILED = "-"

SUMMARY_COLUMNS = (
    "problem", "algorithm", "runs", "successes",
    "ul_min", "ul_med", "ul_max", "ll_min", "ll_med", "ll_max",
    "total_med", "savings", "savings_alt",
)
ERROR_COLUMNS = ("gen", "e_mse_psi", "e_mse_phi", "chosen_mapping", "psi_error", "phi_error")
BAR_COLUMNS = ("algorithm", "seed", "success", "ul_evals", "ll_evals")


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def parse_dims(text: Optional[str]) -> Optional[SmdDims]:
    """``"p,q,r"`` or ``"p,q,r,s"`` to :class:`SmdDims`; empty means none."""
    if text is None or text == "":
        return None
    try:
        return SmdDims.parse(str(text))
    except ValueError as exc:
        raise UsageError(f"dims must be integers p,q,r[,s], got {text!r}") from exc


def format_dims(dims: Optional[SmdDims]) -> str:
    return "" if dims is None else dims.as_text()


# ---------------------------------------------------------------- campaigns


@dataclass(frozen=True)
class Overrides:
    """Config knobs exposed on the command line; ``None`` keeps the preset."""

    accuracy: Optional[float] = None
    alpha_stop: Optional[float] = None
    k: Optional[int] = None
    budget: Optional[int] = None

    def apply(self, config: BleaqConfig) -> BleaqConfig:
        changes = {}
        if self.accuracy is not None:
            changes["accuracy_target"] = float(self.accuracy)
        if self.alpha_stop is not None:
            changes["ea"] = config.ea.with_(alpha_stop=float(self.alpha_stop))
            changes["lower_ea"] = config.lower_ea.with_(alpha_stop=float(self.alpha_stop))
        if self.k is not None:
            changes["local_search_every_k"] = int(self.k)
        if self.budget is not None:
            changes["max_ll_calls"] = int(self.budget)
        return replace(config, **changes) if changes else config


@dataclass(frozen=True)
class Campaign:
    algorithm: str
    problem: str
    dims: Optional[SmdDims] = None
    runs: int = 31
    base_seed: int = 0
    overrides: Overrides = field(default_factory=Overrides)
    out_dir: Optional[Path] = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {self.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        if self.runs < 1:
            raise UsageError("runs must be >= 1")
        registry_lookup(self.problem, self.dims)  # validates name and dims

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.runs)]

    @property
    def label(self) -> str:
        dims = format_dims(self.dims).replace(",", "-")
        return f"{self.problem}{'_' + dims if dims else ''}_{self.algorithm}"

    @property
    def directory(self) -> Path:
        return Path(self.out_dir if self.out_dir is not None else default_out_dir()) / self.label

    def config(self) -> BleaqConfig:
        base = BleaqConfig() if self.algorithm == "bleaq2" else BleaqConfig.nested()
        return self.overrides.apply(base)

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "problem": self.problem,
            "dims": format_dims(self.dims),
            "runs": self.runs,
            "base_seed": self.base_seed,
            "overrides": asdict(self.overrides),
        }

    @classmethod
    def from_dict(cls, data: dict, out_dir: Optional[Path] = None) -> "Campaign":
        return cls(
            algorithm=data["algorithm"],
            problem=data["problem"],
            dims=parse_dims(data.get("dims")),
            runs=int(data["runs"]),
            base_seed=int(data["base_seed"]),
            overrides=Overrides(**data.get("overrides", {})),
            out_dir=out_dir,
        )


def _run_one(spec: dict, seed: int) -> RunRecord:
    campaign = Campaign.from_dict(spec)
    problem = registry_lookup(campaign.problem, campaign.dims)
    return ALGORITHMS[campaign.algorithm](problem, campaign.config(), seed=seed)


def record_name(seed: int) -> str:
    return f"seed-{seed}.tsv"


def run_campaign(campaign: Campaign, workers: int = 1, write: bool = True) -> list[RunRecord]:
    """Run every seed of ``campaign``; write one record file per run and a manifest.

    Aborted runs come back as failed records and the campaign continues.
    """
    spec = campaign.to_dict()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, [spec] * campaign.runs, campaign.seeds))
    else:
        records = [_run_one(spec, s) for s in campaign.seeds]
    if write:
        out = campaign.directory
        out.mkdir(parents=True, exist_ok=True)
        for rec in records:
            (out / record_name(rec.seed)).write_text(format_record(rec, campaign), encoding="utf-8")
        (out / MANIFEST_NAME).write_text(format_manifest(campaign), encoding="utf-8")
    return records


def format_manifest(campaign: Campaign) -> str:
    from . import __version__

    data = {
        "format": "bilevel-manifest",
        "version": RECORD_VERSION,
        "campaign": campaign.to_dict(),
        "seeds": campaign.seeds,
        "records": [record_name(s) for s in campaign.seeds],
        "versions": {
            "artifact": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def load_manifest(path: Union[str, Path]) -> tuple[Campaign, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("format") != "bilevel-manifest":
        raise UsageError(f"{path} is not a campaign manifest")
    return Campaign.from_dict(data["campaign"], out_dir=path.parent.parent), data


# ---------------------------------------------------------------- record files


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def _vec(x) -> str:
    return " ".join(_num(v) for v in np.asarray(x, dtype=float).ravel())


@dataclass
class RecordSummary:
    """What a record file holds; the unit every table and plot works on."""

    algorithm: str
    problem: str
    dims: str
    seed: int
    success: bool
    terminated_by: str
    generations: int
    ul_evals: int
    ll_evals: int
    best_F: float
    best_f: float
    best_x_u: np.ndarray
    best_x_l: np.ndarray
    trace: list[dict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.ul_evals + self.ll_evals

    @classmethod
    def from_run(cls, rec: RunRecord, dims: str = "") -> "RecordSummary":
        text = format_record(rec, None, dims)
        return parse_record(text)


def format_record(rec: RunRecord, campaign: Optional[Campaign] = None, dims: Optional[str] = None) -> str:
    if dims is None:
        dims = format_dims(campaign.dims) if campaign is not None else ""
    b = rec.best
    head = [
        ("algorithm", rec.algorithm),
        ("problem", rec.problem),
        ("dims", dims),
        ("seed", _num(rec.seed)),
        ("success", _num(bool(rec.success))),
        ("terminated_by", rec.terminated_by.value),
        ("generations", _num(rec.generations)),
        ("ul_evals", _num(rec.counter.ul_evals)),
        ("ll_evals", _num(rec.counter.ll_evals)),
        ("best_F", _num(b.F_val)),
        ("best_f", _num(b.f_val)),
        ("best_x_u", _vec(b.x_u)),
        ("best_x_l", _vec(b.x_l)),
        ("ul_violation", _num(b.ul_violation)),
        ("ll_violation", _num(b.ll_violation)),
        ("tag", _num(int(b.tag))),
        ("message", rec.message.replace("\t", " ").replace("\n", " ")),
    ]
    lines = [f"# {RECORD_FORMAT} v{RECORD_VERSION}"]
    lines += [f"{k}\t{v}" for k, v in head]
    lines.append("[trace]")
    lines.append("\t".join(("gen", "best_F", "ul_evals", "ll_evals") + ERROR_COLUMNS[1:]))
    for t in rec.trace:
        lines.append("\t".join([
            _num(t.gen), _num(t.best_F), _num(t.ul_evals), _num(t.ll_evals),
            _num(t.e_mse_psi), _num(t.e_mse_phi), t.chosen_mapping or "none",
            _num(t.psi_error), _num(t.phi_error),
        ]))
    return "\n".join(lines) + "\n"


def _opt_float(s: str) -> Optional[float]:
    return None if s == "" else float(s)


def parse_record(text: str) -> RecordSummary:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"# {RECORD_FORMAT} v"):
        raise UsageError("not a record file")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != RECORD_VERSION:
        raise UsageError(f"unsupported record version {version}")
    head: dict[str, str] = {}
    i = 1
    while i < len(lines) and lines[i] != "[trace]":
        key, _, value = lines[i].partition("\t")
        head[key] = value
        i += 1
    trace = []
    if i < len(lines):
        cols = lines[i + 1].split("\t")
        for row in lines[i + 2:]:
            vals = dict(zip(cols, row.split("\t")))
            trace.append({
                "gen": int(vals["gen"]),
                "best_F": float(vals["best_F"]),
                "ul_evals": int(vals["ul_evals"]),
                "ll_evals": int(vals["ll_evals"]),
                "e_mse_psi": _opt_float(vals["e_mse_psi"]),
                "e_mse_phi": _opt_float(vals["e_mse_phi"]),
                "chosen_mapping": vals["chosen_mapping"],
                "psi_error": _opt_float(vals["psi_error"]),
                "phi_error": _opt_float(vals["phi_error"]),
            })
    vec = lambda s: np.array([float(v) for v in s.split()]) if s else np.zeros(0)
    return RecordSummary(
        algorithm=head["algorithm"],
        problem=head["problem"],
        dims=head.get("dims", ""),
        seed=int(head["seed"]),
        success=head["success"] == "1",
        terminated_by=head["terminated_by"],
        generations=int(head["generations"]),
        ul_evals=int(head["ul_evals"]),
        ll_evals=int(head["ll_evals"]),
        best_F=float(head["best_F"]),
        best_f=float(head["best_f"]),
        best_x_u=vec(head["best_x_u"]),
        best_x_l=vec(head["best_x_l"]),
        trace=trace,
    )


def read_record(path: Union[str, Path]) -> RecordSummary:
    return parse_record(Path(path).read_text(encoding="utf-8"))


def load_records(root: Union[str, Path]) -> list[RecordSummary]:
    """Every record file below ``root``, in sorted path order."""
    root = Path(root)
    paths = [root] if root.is_file() else sorted(root.rglob("seed-*.tsv"))
    return [read_record(p) for p in paths]


# ---------------------------------------------------------------- statistics


def lower_median(values: Sequence[float]):
    """Median; for an even count the lower of the two middle elements."""
    if len(values) == 0:
        raise UsageError("median of an empty sequence")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def compute_savings(a_total: float, b_total: float, reference_failed: bool = False) -> Union[float, str]:
    """Percentage of ``b_total`` saved by ``a_total``: ``100 (b - a) / b``.

    Returns :data:`LARGE` when the reference failed and :data:`UNDEFINED`
    for a zero reference total.
    """
    if reference_failed:
        return LARGE
    if b_total == 0:
        return UNDEFINED
    return 100.0 * (b_total - a_total) / b_total


def format_savings(value: Union[float, str, None]) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return f"{int(math.floor(value + 0.5))}%"


@dataclass
class SummaryRow:
    problem: str
    algorithm: str
    runs: int
    successes: int
    ul: Optional[tuple[int, int, int]]  # min, median, max over successful runs
    ll: Optional[tuple[int, int, int]]
    total_med: Optional[int]  # median total of the successful runs
    savings: Union[float, str, None] = None
    savings_alt: Union[float, str, None] = None  # from median UL + median LL

    @property
    def failed(self) -> bool:
        return self.successes == 0

    def cells(self) -> list[str]:
        def trio(t):
            return [FAILED] * 3 if t is None else [str(v) for v in t]

        return [
            self.problem, self.algorithm, str(self.runs), str(self.successes),
            *trio(self.ul), *trio(self.ll),
            FAILED if self.total_med is None else str(self.total_med),
            format_savings(self.savings), format_savings(self.savings_alt),
        ]


def _cell(problem: str, algorithm: str, recs: list[RecordSummary]) -> SummaryRow:
    ok = [r for r in recs if r.success]
    if not ok:
        return SummaryRow(problem, algorithm, len(recs), 0, None, None, None)
    ul = [r.ul_evals for r in ok]
    ll = [r.ll_evals for r in ok]
    return SummaryRow(
        problem, algorithm, len(recs), len(ok),
        (min(ul), lower_median(ul), max(ul)),
        (min(ll), lower_median(ll), max(ll)),
        lower_median([r.total for r in ok]),
    )


def problem_key(r: RecordSummary) -> str:
    return r.problem + (f"[{r.dims}]" if r.dims else "")


def summarize(records: Iterable[RecordSummary], reference: Optional[str] = "nested") -> list[SummaryRow]:
    """One row per (problem, algorithm); savings of each algorithm against ``reference``."""
    groups: dict[tuple[str, str], list[RecordSummary]] = {}
    for r in records:
        groups.setdefault((problem_key(r), r.algorithm), []).append(r)
    order = {name: i for i, name in enumerate(catalog())}
    algo_order = {name: i for i, name in enumerate(ALGORITHMS)}
    keys = sorted(groups, key=lambda k: (order.get(k[0].split("[")[0], len(order)), k[0],
                                         algo_order.get(k[1], len(algo_order)), k[1]))
    rows = [_cell(p, a, groups[(p, a)]) for p, a in keys]
    by_key = {(r.problem, r.algorithm): r for r in rows}
    for row in rows:
        ref = by_key.get((row.problem, reference)) if reference else None
        if ref is None or ref is row or row.failed:
            continue
        row.savings = compute_savings(row.total_med, ref.total_med or 0, ref.failed)
        if not ref.failed:
            row.savings_alt = compute_savings(row.ul[1] + row.ll[1], ref.ul[1] + ref.ll[1])
        else:
            row.savings_alt = LARGE
    return rows


def table_csv(rows: Sequence[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow(row.cells())
    return buf.getvalue()


def table_markdown(rows: Sequence[SummaryRow]) -> str:
    lines = ["| " + " | ".join(SUMMARY_COLUMNS) + " |", "|" + "---|" * len(SUMMARY_COLUMNS)]
    lines += ["| " + " | ".join(row.cells()) + " |" for row in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- plot data


def _safe(name: str) -> str:
    return name.replace("[", "_").replace("]", "").replace(",", "-")


def emit_plot_data(records: Sequence[RecordSummary], out_dir: Union[str, Path]) -> tuple[list[Path], list[str]]:
    """Write per-problem bar data and per-run approximation-error series.

    Returns the written paths and any notices (records without a trace).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    notices: list[str] = []
    by_problem: dict[str, list[RecordSummary]] = {}
    for r in records:
        by_problem.setdefault(problem_key(r), []).append(r)
    for prob in sorted(by_problem):
        recs = sorted(by_problem[prob], key=lambda r: (r.algorithm, r.seed))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BAR_COLUMNS)
        for r in recs:
            w.writerow([r.algorithm, r.seed, int(r.success), r.ul_evals, r.ll_evals])
        path = out / f"bars_{_safe(prob)}.csv"
        path.write_text(buf.getvalue(), encoding="utf-8")
        written.append(path)
        for r in recs:
            if not r.trace:
                notices.append(f"{prob} {r.algorithm} seed {r.seed}: no trace, counts only")
                continue
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(ERROR_COLUMNS)
            for t in r.trace:
                w.writerow([t["gen"]] + ["" if t[c] is None else _num(t[c]) if c != "chosen_mapping" else t[c]
                                         for c in ERROR_COLUMNS[1:]])
            path = out / f"errors_{_safe(prob)}_{r.algorithm}_seed-{r.seed}.csv"
            path.write_text(buf.getvalue(), encoding="utf-8")
            written.append(path)
    return written, notices
