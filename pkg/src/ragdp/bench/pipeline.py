"""Pipeline stages behind the CLI: data, training, knowledge base, evaluation sweeps.

All artifacts live under the configured output directory::

    dataset.bin            demonstrations
    kb.bin                 knowledge base built from them
    models/<kind>_seed<s>.ckpt and .loss.csv
    report.csv             one aggregated row per evaluation cell
    timing.csv             wall-clock per generation call for the same cells
"""

from __future__ import annotations

import csv
import io
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ragdp import envs, kbase, nn
from ragdp._backend import BACKEND
from ragdp.bench.config import NOISE_MIXED, RunConfig
from ragdp.checkpoint import Checkpoint, Normalization
from ragdp.errors import MetadataMismatchError
from ragdp.policy import Mode, Policy, PolicyConfig, episode_rng, expected_budget, leap_steps, recovery_rate, rollout
from ragdp.samplers import SamplerKind
from ragdp.schedules import make_ve_schedule, make_vp_schedule

log = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "task",
    "base_model",
    "mode",
    "sampler",
    "steps",
    "r",
    "network_evals",
    "speedup",
    "n_rollouts",
    "n_invalid",
    "success_rate",
    "recovery_rate",
    "success_by_seed",
]
TIMING_COLUMNS = ["task", "base_model", "mode", "sampler", "steps", "r", "network_evals", "gen_calls", "mean_gen_ms", "median_gen_ms"]
KEY_COLUMNS = ("task", "base_model", "mode", "sampler", "steps", "r")


@dataclass(frozen=True)
class Paths:
    root: Path

    @property
    def dataset(self) -> Path:
        return self.root / "dataset.bin"

    @property
    def kb(self) -> Path:
        return self.root / "kb.bin"

    def checkpoint(self, kind: str, seed: int) -> Path:
        return self.root / "models" / f"{kind}_seed{seed}.ckpt"

    def loss_curve(self, kind: str, seed: int) -> Path:
        return self.root / "models" / f"{kind}_seed{seed}.loss.csv"

    @property
    def report(self) -> Path:
        return self.root / "report.csv"

    @property
    def timing(self) -> Path:
        return self.root / "timing.csv"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"


def paths_for(cfg: RunConfig, out: str | os.PathLike | None = None) -> Paths:
    return Paths(Path(out if out is not None else cfg.output_dir))


def make_schedule(cfg: RunConfig, kind: str):
    if kind == "vp":
        m = cfg.models.vp
        return make_vp_schedule(m.T, m.beta_start, m.beta_end)
    m = cfg.models.ve
    return make_ve_schedule(m.T, m.sigma_min, m.sigma_max, m.rho)


# -- data and training ----------------------------------------------------------------


def generate(cfg: RunConfig, seed: int | None = None) -> envs.DemoDataset:
    d = cfg.data
    if d.noise_level == NOISE_MIXED:
        levels = envs.mixed_quality_levels(d.n_episodes, 1 / 3, d.mixed_noise)
    else:
        levels = float(d.noise_level)
    env = envs.make_env(cfg.task)
    return envs.generate_dataset(env, envs.make_expert(cfg.task), d.n_episodes, d.seed if seed is None else seed, levels)


def cmd_gen_data(cfg: RunConfig, out=None, seed: int | None = None) -> tuple[Path, str]:
    paths = paths_for(cfg, out)
    ds = generate(cfg, seed)
    ds.save(paths.dataset)
    return paths.dataset, ds.content_hash()


def load_dataset(cfg: RunConfig, path) -> envs.DemoDataset:
    ds = envs.DemoDataset.load(path)
    if ds.env_id != cfg.task:
        raise MetadataMismatchError(f"dataset {path} is for task {ds.env_id!r}, config says {cfg.task!r}")
    return ds


def train_model(cfg: RunConfig, ds: envs.DemoDataset, kind: str, seed: int) -> tuple[Checkpoint, list[float]]:
    h = cfg.horizons
    obs, act, skipped = ds.chunks(h.T_o, h.T_p)
    if len(act) == 0:
        raise MetadataMismatchError(f"no episode is long enough for T_p={h.T_p}")
    schedule = make_schedule(cfg, kind)
    pred = nn.PredictionType.EPSILON if kind == "vp" else nn.PredictionType.SAMPLE
    net = nn.ScoreNet(
        ds.obs_dim, ds.act_dim, h.T_o, h.T_p, hidden=cfg.network.hidden, embed_dim=cfg.network.embed_dim, prediction_type=pred
    )
    net.init_params(np.random.default_rng([seed, 0x1417]), cfg.network.init_head_scale)
    t = cfg.train
    tcfg = nn.TrainConfig(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate, rng_seed=seed, grad_clip=t.grad_clip)
    net, curve = nn.train(net, obs, act, schedule, tcfg)
    info = {
        "task": cfg.task,
        "kind": kind,
        "train_seed": int(seed),
        "epochs": t.epochs,
        "batch_size": t.batch_size,
        "learning_rate": t.learning_rate,
        "grad_clip": t.grad_clip,
        "n_chunks": int(len(act)),
        "skipped_episodes": int(skipped),
        "final_loss": float(curve[-1]),
    }
    ckpt = Checkpoint(net, schedule, Normalization.from_dataset(ds), ds.content_hash(), info)
    return ckpt, curve


def cmd_train(cfg: RunConfig, out=None, dataset=None, kinds=None, seeds=None) -> list[tuple[Path, str]]:
    """Train every requested (model kind, seed); returns (checkpoint path, sha256) pairs."""
    paths = paths_for(cfg, out)
    ds = load_dataset(cfg, dataset or paths.dataset)
    written = []
    for kind in kinds or cfg.models.kinds():
        if getattr(cfg.models, kind) is None:
            raise MetadataMismatchError(f"model kind {kind!r} is not configured")
        for seed in cfg.train.seeds if seeds is None else seeds:
            ckpt, curve = train_model(cfg, ds, kind, seed)
            path = paths.checkpoint(kind, seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            digest = ckpt.save(path)
            lines = ["epoch,loss"] + [f"{i},{loss:.10g}" for i, loss in enumerate(curve)]
            paths.loss_curve(kind, seed).write_text("\n".join(lines) + "\n")
            log.info("trained %s seed %d: final loss %.5f", kind, seed, curve[-1])
            written.append((path, digest))
    return written


def cmd_build_db(cfg: RunConfig, out=None, dataset=None) -> tuple[Path, kbase.KnowledgeBase]:
    paths = paths_for(cfg, out)
    ds = load_dataset(cfg, dataset or paths.dataset)
    h = cfg.horizons
    kb = kbase.build(ds, h.T_o, h.T_p, task_id=cfg.task)
    if kb.meta["skipped_episodes"] == len(ds.episodes):
        raise MetadataMismatchError(f"no episode is long enough for T_p={h.T_p}")
    kb.save(paths.kb)
    return paths.kb, kb


# -- evaluation -----------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    """One evaluation setting: a base model kind and a generation mode."""

    kind: str
    mode: Mode
    sampler: SamplerKind
    steps: int | None = None
    r: float | None = None

    def policy_config(self, cfg: RunConfig) -> PolicyConfig:
        h = cfg.horizons
        return PolicyConfig(
            mode=self.mode,
            r=self.r if self.r is not None else 0.0,
            T=getattr(cfg.models, self.kind).T,
            T_o=h.T_o,
            T_p=h.T_p,
            T_a=h.T_a,
            rng_seed=cfg.eval.policy_seed,
            sampler=self.sampler,
            steps=self.steps,
        )

    def uses_kb(self) -> bool:
        return self.mode in (Mode.RAGDP_VP, Mode.RAGDP_VE)


def make_cell(cfg: RunConfig, mode: str, r: float | None = None, steps: int | None = None, kind: str | None = None, sampler: str | None = None) -> Cell:
    """Fill in the model kind and sampler a mode implies, and validate the combination."""
    mode = Mode(mode)
    if kind is None:
        kind = "ve" if mode is Mode.RAGDP_VE else "vp" if mode is Mode.RAGDP_VP else cfg.models.kinds()[0]
    if getattr(cfg.models, kind, None) is None:
        raise MetadataMismatchError(f"model kind {kind!r} is not configured")
    if sampler is None:
        sampler = SamplerKind.VE_EULER if kind == "ve" else SamplerKind.VP_ANCESTRAL
    if mode in (Mode.RAGDP_VP, Mode.RAGDP_VE):
        if r is None:
            raise ValueError(f"{mode.value} needs --r")
        steps = None
    else:
        r = None
        if mode is Mode.BASELINE_FULL:
            steps = None
        elif steps is None:
            raise ValueError("baseline-fast needs --steps")
    cell = Cell(kind, mode, SamplerKind(sampler), steps, r)
    cell.policy_config(cfg)  # raises on inconsistent settings
    return cell


def sweep_cells(cfg: RunConfig) -> list[Cell]:
    """The evaluation grid in report order: full baseline, reduced baselines, RAGDP."""
    s = cfg.sweep
    cells: list[Cell] = []
    if cfg.models.vp is not None:
        cells.append(Cell("vp", Mode.BASELINE_FULL, SamplerKind.VP_ANCESTRAL))
        cells += [Cell("vp", Mode.BASELINE_FAST, SamplerKind.VP_ANCESTRAL, n) for n in s.vp_ancestral_steps]
        cells += [Cell("vp", Mode.BASELINE_FAST, SamplerKind.VP_FAST, n) for n in s.vp_fast_steps]
        for sampler in s.ragdp_vp_samplers:
            cells += [Cell("vp", Mode.RAGDP_VP, SamplerKind(sampler), None, r) for r in s.ragdp_vp_r]
    if cfg.models.ve is not None:
        cells.append(Cell("ve", Mode.BASELINE_FULL, SamplerKind.VE_EULER))
        cells += [Cell("ve", Mode.BASELINE_FAST, SamplerKind.VE_EULER, n) for n in s.ve_steps]
        cells += [Cell("ve", Mode.RAGDP_VE, SamplerKind.VE_EULER, None, r) for r in s.ragdp_ve_r]
    return cells


@dataclass
class CellResult:
    cell: Cell
    successes: dict[int, list[bool]]  # train seed -> per-episode success (valid episodes)
    n_invalid: int
    gen_times: list[float]
    network_evals: int


_CACHE: dict[tuple[str, str], object] = {}


def _cached(kind: str, path: str, loader):
    key = (kind, path)
    if key not in _CACHE:
        _CACHE[key] = loader(path)
    return _CACHE[key]


def _eval_job(job: tuple) -> tuple:
    """Worker entry point: roll out one (cell, training seed) over a block of env seeds."""
    cfg, cell, train_seed, ckpt_path, kb_path, env_seeds = job
    ckpt = _cached("ckpt", ckpt_path, Checkpoint.load)
    kb = _cached("kb", kb_path, kbase.KnowledgeBase.load) if kb_path else None
    policy = Policy(cell.policy_config(cfg), ckpt.net, ckpt.schedule, ckpt.norm, kb)
    env = envs.make_env(cfg.task)
    out = []
    for s in env_seeds:
        rng = episode_rng(cfg.eval.policy_seed, train_seed, s)
        res = rollout(env, policy, cfg.eval.max_steps, rng, s)
        out.append((s, res.success, res.valid, res.gen_times, res.budget.network_evals))
    return train_seed, out


def _check_artifacts(cfg: RunConfig, paths: Paths, cell: Cell) -> str | None:
    """Verify checkpoints and KB agree with each other and the config; returns the KB path."""
    h = cfg.horizons
    hashes = set()
    for seed in cfg.train.seeds:
        path = paths.checkpoint(cell.kind, seed)
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}; run `train` first")
        ckpt = Checkpoint.load(path)
        arch = ckpt.net.arch()
        if (arch["T_o"], arch["T_p"]) != (h.T_o, h.T_p):
            raise MetadataMismatchError(f"{path} was trained with T_o={arch['T_o']}, T_p={arch['T_p']}")
        if ckpt.info.get("task") != cfg.task:
            raise MetadataMismatchError(f"{path} was trained on {ckpt.info.get('task')!r}")
        if ckpt.schedule.params() != make_schedule(cfg, cell.kind).params():
            raise MetadataMismatchError(f"{path} uses a different noise schedule than the config")
        hashes.add(ckpt.dataset_hash)
    if paths.dataset.exists():
        meta = envs.DemoDataset.load(paths.dataset).meta
        lo, hi = meta["seed_range"]
        seeds = cfg.eval.seeds()
        if seeds[0] < hi and lo <= seeds[-1]:
            raise MetadataMismatchError(f"eval seeds overlap the dataset seed range [{lo}, {hi})")
    if not cell.uses_kb():
        return None
    if not paths.kb.exists():
        raise FileNotFoundError(f"{cell.mode.value} needs a knowledge base; run `build-db` first")
    kb = kbase.KnowledgeBase.load(paths.kb, T_o=h.T_o, T_p=h.T_p)
    if kb.meta["dataset_hash"] not in hashes or len(hashes) != 1:
        raise MetadataMismatchError("knowledge base and checkpoints were built from different datasets")
    return str(paths.kb)


def evaluate_cell(cfg: RunConfig, cell: Cell, out=None, workers: int | None = None) -> CellResult:
    return evaluate_cells(cfg, [cell], out, workers)[0]


def evaluate_cells(cfg: RunConfig, cells: list[Cell], out=None, workers: int | None = None) -> list[CellResult]:
    """Run every cell over training seeds x eval seeds; rows are joined after all workers finish."""
    paths = paths_for(cfg, out)
    workers = workers or cfg.eval.workers
    seeds = cfg.eval.seeds()
    n_blocks = max(1, min(workers, len(seeds)))
    blocks = [list(b) for b in np.array_split(np.array(seeds, dtype=np.int64), n_blocks)]
    jobs, owners = [], []
    for ci, cell in enumerate(cells):
        kb_path = _check_artifacts(cfg, paths, cell)
        for seed in cfg.train.seeds:
            ckpt = str(paths.checkpoint(cell.kind, seed))
            for block in blocks:
                jobs.append((cfg, cell, seed, ckpt, kb_path, [int(s) for s in block]))
                owners.append(ci)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_eval_job, jobs))
    else:
        outputs = [_eval_job(job) for job in jobs]

    results = [CellResult(cell, {s: [] for s in cfg.train.seeds}, 0, [], 0) for cell in cells]
    evals = [[0, 0] for _ in cells]
    for ci, (train_seed, episodes) in zip(owners, outputs):
        res = results[ci]
        for _, success, valid, times, n_evals in episodes:
            if not valid:
                res.n_invalid += 1
                continue
            res.successes[train_seed].append(bool(success))
            res.gen_times.extend(times)
            evals[ci][0] += n_evals
            evals[ci][1] += len(times)
    for res, (total, calls) in zip(results, evals):
        c = res.cell
        want = expected_budget(c.mode, make_schedule(cfg, c.kind), c.r or 0.0, c.steps).network_evals
        if calls and total != want * calls:
            raise RuntimeError(f"{c}: measured {total / calls:.3f} network evals per call, expected {want}")
        res.network_evals = want
    return results


# -- report rows ----------------------------------------------------------------------


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.6f}"


def cell_steps(cfg: RunConfig, cell: Cell) -> int:
    T = getattr(cfg.models, cell.kind).T
    if cell.mode is Mode.BASELINE_FULL:
        return T
    if cell.mode is Mode.BASELINE_FAST:
        return int(cell.steps)
    return leap_steps(cell.r, T)


def result_row(cfg: RunConfig, res: CellResult) -> dict:
    c = res.cell
    T = getattr(cfg.models, c.kind).T
    flat = [s for seed in cfg.train.seeds for s in res.successes[seed]]
    success = float(np.mean(flat)) if flat else 0.0
    by_seed = ";".join(f"{np.mean(res.successes[s]):.6f}" if res.successes[s] else "n/a" for s in cfg.train.seeds)
    return {
        "task": cfg.task,
        "base_model": c.kind,
        "mode": c.mode.value,
        "sampler": c.sampler.value,
        "steps": str(cell_steps(cfg, c)),
        "r": "" if c.r is None else f"{c.r:g}",
        "network_evals": str(res.network_evals),
        "speedup": f"{T / res.network_evals:.6g}" if res.network_evals else "inf",
        "n_rollouts": str(len(flat)),
        "n_invalid": str(res.n_invalid),
        "success_rate": _fmt(success),
        "recovery_rate": "",
        "success_by_seed": by_seed,
    }


def timing_row(cfg: RunConfig, res: CellResult) -> dict:
    row = {k: v for k, v in result_row(cfg, res).items() if k in TIMING_COLUMNS}
    t = np.array(res.gen_times) * 1e3
    row["gen_calls"] = str(len(t))
    row["mean_gen_ms"] = f"{t.mean():.4f}" if len(t) else "n/a"
    row["median_gen_ms"] = f"{np.median(t):.4f}" if len(t) else "n/a"
    return row


def fill_recovery(rows: list[dict]) -> list[dict]:
    """Recovery rate of every row against the full baseline of the same task and base model."""
    base = {
        (r["task"], r["base_model"]): float(r["success_rate"])
        for r in rows
        if r["mode"] == Mode.BASELINE_FULL.value
    }
    for r in rows:
        key = (r["task"], r["base_model"])
        if key not in base:
            r["recovery_rate"] = ""
            continue
        r["recovery_rate"] = _fmt(recovery_rate(float(r["success_rate"]), base[key]))
    return rows


def metadata_line() -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    cpu = platform.processor() or platform.machine()
    return f"# generated={stamp} backend={BACKEND} host={platform.node()} cpu={cpu} cores={os.cpu_count()}"


def write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    buf.write(metadata_line() + "\n")
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def read_rows(path) -> list[dict]:
    """Rows of a report or timing CSV, skipping ``#`` metadata lines."""
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _merge(existing: list[dict], new: list[dict]) -> list[dict]:
    index = {tuple(r[k] for k in KEY_COLUMNS): i for i, r in enumerate(existing)}
    rows = list(existing)
    for r in new:
        key = tuple(r[k] for k in KEY_COLUMNS)
        if key in index:
            rows[index[key]] = r
        else:
            index[key] = len(rows)
            rows.append(r)
    return rows


def cmd_eval(cfg: RunConfig, cell: Cell, out=None, workers: int | None = None) -> dict:
    """Evaluate one cell and merge its row into report.csv and timing.csv."""
    paths = paths_for(cfg, out)
    res = evaluate_cell(cfg, cell, out, workers)
    row = result_row(cfg, res)
    old = read_rows(paths.report) if paths.report.exists() else []
    rows = fill_recovery(_merge(old, [row]))
    write_rows(paths.report, REPORT_COLUMNS, rows)
    old_t = read_rows(paths.timing) if paths.timing.exists() else []
    write_rows(paths.timing, TIMING_COLUMNS, _merge(old_t, [timing_row(cfg, res)]))
    return next(r for r in rows if all(r[k] == row[k] for k in KEY_COLUMNS))


def cmd_sweep(cfg: RunConfig, out=None, workers: int | None = None) -> list[dict]:
    """Evaluate the configured grid and rewrite report.csv and timing.csv from scratch."""
    paths = paths_for(cfg, out)
    results = evaluate_cells(cfg, sweep_cells(cfg), out, workers)
    rows = fill_recovery([result_row(cfg, r) for r in results])
    write_rows(paths.report, REPORT_COLUMNS, rows)
    write_rows(paths.timing, TIMING_COLUMNS, [timing_row(cfg, r) for r in results])
    return rows


def run_all(cfg: RunConfig, out=None, workers: int | None = None) -> list[dict]:
    """gen-data, train, build-db and sweep from one config."""
    cmd_gen_data(cfg, out)
    cmd_train(cfg, out)
    cmd_build_db(cfg, out)
    return cmd_sweep(cfg, out, workers)
