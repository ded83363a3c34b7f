"""End-to-end stages shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import model_config, train_config
from .latent_lab import DisentanglementMatrix, TokenLift, disentanglement, numerical_slopes
from .model import AeroJEPANet
from .optimize import Envelope, LatentOptProblem, OptResult, TrustRegion, retrieve_nearest, solve
from .probes import fit_suites
from .synthgen import DESIGN_NAMES, Conditions, drag_coefficient, integrate_forces, lift_coefficient, make_dataset
from .training import (
    Checkpoint, LatentTable, MetricReport, case_predictor, context_cloud, evaluate, extract_latents, train,
)
from .geometry import PointCloud

log = logging.getLogger(__name__)


def build_dataset(cfg: dict) -> tuple:
    return make_dataset(
        cfg["data.n_cases"], split=tuple(cfg["data.split"]), seed=cfg["seed"],
        conditions_per_design=cfg["data.conditions_per_design"], resolution=cfg["data.resolution"],
        mach=cfg["data.mach"],
    )


def split_cases(cases, manifest, *names) -> list:
    ids = set()
    for n in names:
        ids.update(manifest.splits[n])
    return [c for c in cases if c.case_id in ids]


def fit_model(cases, manifest, cfg: dict, progress=None) -> Checkpoint:
    ckpt, _ = train(split_cases(cases, manifest, "train"), train_config(cfg), model_config(cfg), progress=progress)
    return ckpt


@dataclass
class ParityResult:
    case_ids: np.ndarray
    cl_decoded: np.ndarray
    cl_analytic: np.ndarray
    correlation: float


def force_parity(net: AeroJEPANet, cases, n_context: int) -> ParityResult:
    """Integrate pressure decoded on each case's own contour and compare with analytic C_L."""
    dec, ana = [], []
    for case in cases:
        zp = case_predictor(net, case, n_context)
        vals = net.decode(zp, case.field.coords)
        lift, _ = integrate_forces(PointCloud(case.field.coords, vals, ("cp",)), case.conditions.alpha)
        dec.append(lift)
        ana.append(case.cl)
    dec, ana = np.asarray(dec), np.asarray(ana)
    corr = float(np.corrcoef(dec, ana)[0, 1]) if len(dec) > 1 else float("nan")
    return ParityResult(np.array([c.case_id for c in cases]), dec, ana, corr)


def design_sigma(table: LatentTable, names=DESIGN_NAMES) -> np.ndarray:
    """Per-design spread of the training designs, in the order of ``names``."""
    tr = table.mask("train")
    _, first = np.unique(table.design_id[tr], return_index=True)
    sd = table.design[tr][first].std(axis=0)
    return np.array([sd[DESIGN_NAMES.index(n)] for n in names])


def disentanglement_report(table: LatentTable, suites: dict) -> tuple:
    """Closed-form matrix and the two-point numerical estimate, in target std per unit walk."""
    suite = suites["context->design"]
    sx = design_sigma(table, suite.targets)
    tr = table.mask("train")
    mu = table.z_ctx[tr].mean(axis=0)
    closed = disentanglement(suite, sigma_x=sx)
    numeric = numerical_slopes(suite, mu, sigma_x=sx)
    return closed, numeric


@dataclass
class OptimizationOutcome:
    result: OptResult
    problem: LatentOptProblem
    envelope: Envelope
    nearest_case: int
    nearest_distance: float
    nearest_design: np.ndarray
    nearest_ld_analytic: float


def _train_designs(table: LatentTable) -> tuple:
    tr = table.mask("train")
    _, first = np.unique(table.design_id[tr], return_index=True)
    rows = np.flatnonzero(tr)[np.sort(first)]
    return rows


def optimize_design(net: AeroJEPANet, cases, manifest, table: LatentTable, suites: dict, cfg: dict,
                    n_context: int) -> OptimizationOutcome:
    rows = _train_designs(table)
    Z = table.z_ctx[rows]
    region = TrustRegion.from_latents(Z, reg=cfg["optimize.cov_reg"], quantile=cfg["optimize.tau_quantile"])
    by_design = {}
    for c in split_cases(cases, manifest, "train"):
        by_design.setdefault(c.design_id, c)
    lift = TokenLift.fit([net.encode_context(context_cloud(c.geometry, n_context))
                          for _, c in sorted(by_design.items())])
    env = Envelope.from_table(table)
    cruise = Conditions(cfg["optimize.alpha_cruise"], cfg["optimize.mach_cruise"])
    problem = LatentOptProblem(net, lift, suites["predicted->coeffs"], suites["context->design"], region,
                               env, cruise=cruise, prox_weight=cfg["optimize.prox_weight"])
    result = solve(problem, Z, restarts=cfg["optimize.restarts"], seed=cfg["seed"],
                   neighbourhood=cfg["optimize.neighbourhood"])
    x_star = np.array([result.design["thickness"], result.design["camber"]])
    designs = table.design[rows]
    scale = (designs.mean(axis=0), designs.std(axis=0))
    all_ids, all_designs = [], []
    for c in cases:
        all_ids.append(c.case_id)
        all_designs.append(c.design.as_array())
    cid, dist = retrieve_nearest(x_star, np.asarray(all_designs), np.asarray(all_ids), scale)
    case = next(c for c in cases if c.case_id == cid)
    cl = lift_coefficient(case.design, cruise)
    ld = cl / drag_coefficient(case.design.thickness, cl)
    result.nearest_case, result.nearest_distance = cid, dist
    return OptimizationOutcome(result, problem, env, cid, dist, case.design.as_array(), ld)


@dataclass
class DeskRun:
    cases: list
    manifest: object
    checkpoint: Checkpoint
    net: AeroJEPANet
    report: MetricReport
    table: LatentTable
    suites: dict
    probe_rows: list
    closed: DisentanglementMatrix
    numeric: np.ndarray
    opt: Optional[OptimizationOutcome]
    parity: ParityResult
    timings: dict = field(default_factory=dict)

    def probe_r2(self, family: str, target: str) -> float:
        return self.suites[family].heldout_r2[target]


def run_desk(cfg: dict, progress=None, checkpoint: Optional[Checkpoint] = None) -> DeskRun:
    import time

    t0 = time.perf_counter()
    cases, manifest = build_dataset(cfg)
    timings = {"gen": time.perf_counter() - t0}
    if checkpoint is None:
        checkpoint = fit_model(cases, manifest, cfg, progress)
    timings["train"] = time.perf_counter() - t0 - timings["gen"]
    net = checkpoint.build()
    n_ctx = cfg["train.n_context"]
    held = split_cases(cases, manifest, "test")
    report = evaluate(net, held, n_context=n_ctx)
    table = extract_latents(net, cases, manifest, n_context=n_ctx, n_target=cfg["train.n_target"])
    suites, rows = fit_suites(table, n_folds=cfg["probe.folds"], seed=cfg["seed"])
    closed, numeric = disentanglement_report(table, suites)
    parity = force_parity(net, held, n_ctx)
    opt = optimize_design(net, cases, manifest, table, suites, cfg, n_ctx)
    timings["total"] = time.perf_counter() - t0
    return DeskRun(cases, manifest, checkpoint, net, report, table, suites, rows, closed, numeric, opt,
                   parity, timings)
