"""Coupled/decoupled training, field-error metrics and latent extraction."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import DivergenceError, NumericError
from .geometry import PointCloud, fps, sample_triple
from .losses import LossWeights, latent_loss, recon_loss, sigreg_loss, total_loss
from .model import AeroJEPANet, ModelConfig
from .synthgen import Case, make_case

log = logging.getLogger(__name__)

METRIC_NAMES = ("rel_l2", "rel_l1", "rmse_gtmax", "mae_gtmax", "rmse", "mae")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    n_context: int = 256
    n_target: int = 256
    n_query: int = 256
    weights: LossWeights = LossWeights()
    lr: float = 1e-3
    weight_decay: float = 1e-3
    clip_norm: float = 10.0
    warmup_fraction: float = 0.05
    sigreg_projections: int = 64
    sigreg_tokens: bool = False
    decoder_epochs: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "n_context", "n_target", "n_query", "sigreg_projections"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.decoder_epochs is not None and self.decoder_epochs < 1:
            raise ValueError("decoder_epochs must be >= 1")

    @property
    def workflow(self) -> str:
        return self.weights.workflow

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


@dataclass
class Checkpoint:
    """Everything needed to rebuild a trained network."""

    model_config: ModelConfig
    params: dict
    buffers: dict
    train_config: Optional[TrainConfig] = None
    history: list = field(default_factory=list)

    def build(self) -> AeroJEPANet:
        net = AeroJEPANet(self.model_config, seed=0)
        net.load_state_dict(self.params)
        net.set_buffers(self.buffers)
        return net

    @classmethod
    def from_net(cls, net: AeroJEPANet, train_config=None, history=None) -> "Checkpoint":
        return cls(net.cfg, net.state_dict(), net.buffers(), train_config, list(history or []))


# -- batching ------------------------------------------------------------------------------
def _batch_seed(seed: int, epoch: int, case_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(epoch), int(case_id)])


def make_batch(cases: Sequence[Case], cfg: TrainConfig, epoch: int) -> dict:
    ctx, tgt_x, tgt_v, qry_x, qry_v, cond = [], [], [], [], [], []
    sizes = (cfg.n_context, cfg.n_target, cfg.n_query)
    for case in cases:
        tri = sample_triple(case.geometry, case.field, sizes, seed=_batch_seed(cfg.seed, epoch, case.case_id))
        ctx.append(tri.context.coords)
        tgt_x.append(tri.target.coords)
        tgt_v.append(tri.target.features)
        qry_x.append(tri.query.coords)
        qry_v.append(tri.query.features)
        cond.append(case.conditions.as_array())
    return {
        "ctx": np.stack(ctx), "tgt_x": np.stack(tgt_x), "tgt_v": np.stack(tgt_v),
        "qry_x": np.stack(qry_x), "qry_v": np.stack(qry_v), "cond": np.stack(cond),
    }


def field_statistics(cases: Sequence[Case]) -> tuple:
    vals = np.concatenate([c.field.features for c in cases], axis=0)
    std = vals.std(axis=0)
    return vals.mean(axis=0), np.where(std > 0, std, 1.0)


def _sig(net_tokens, cfg: TrainConfig, step_seed) -> nx.Tensor:
    z = net_tokens if cfg.sigreg_tokens else net_tokens.mean(axis=1)
    return sigreg_loss(z, cfg.sigreg_projections, step_seed)


def loss_parts(net: AeroJEPANet, batch: dict, cfg: TrainConfig, step_seed, with_recon: bool = True) -> dict:
    """Forward pass for one batch; returns tensors ``lat``, ``rec`` (optional), ``sig``."""
    zc, cc = net.context_tokens(batch["ctx"])
    zt, _ = net.target_tokens(batch["tgt_x"], net.normalize_field(batch["tgt_v"]))
    zp = net.predicted_tokens(zc, cc, batch["cond"])
    s_c, s_t = np.random.SeedSequence(step_seed).spawn(2)
    parts = {
        "lat": latent_loss(zp, zt),
        "sig": (_sig(zc, cfg, s_c) + _sig(zt, cfg, s_t)) * 0.5,
    }
    if with_recon:
        dec = net.decoded(zp, batch["qry_x"])
        parts["rec"] = recon_loss(dec, net.normalize_field(batch["qry_v"]))
    return parts


def _param_groups(net: AeroJEPANet) -> tuple:
    params = net.parameters()
    dec = {k: v for k, v in params.items() if k.startswith("decoder.")}
    rest = {k: v for k, v in params.items() if not k.startswith("decoder.")}
    return rest, dec


def _run_stage(net, cases, cfg: TrainConfig, params: dict, epochs: int, stage: str,
               weights: LossWeights, history: list, progress=None) -> None:
    n = len(cases)
    steps_per_epoch = -(-n // cfg.batch_size)
    state = nx.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
                              total_steps=epochs * steps_per_epoch, warmup_fraction=cfg.warmup_fraction)
    opt = nx.AdamW(params, state)
    frozen = stage == "decoder"
    good = net.state_dict()
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), epoch, 1 + int(frozen), 104729])).permutation(n)
        sums = {"total": 0.0, "lat": 0.0, "rec": 0.0, "sig": 0.0}
        for start in range(0, n, cfg.batch_size):
            batch_cases = [cases[i] for i in order[start:start + cfg.batch_size]]
            batch = make_batch(batch_cases, cfg, epoch if not frozen else 10_000 + epoch)
            step += 1
            step_seed = [int(cfg.seed), 7919, step, int(frozen)]
            try:
                if frozen:
                    with nx.no_grad():
                        zc, cc = net.context_tokens(batch["ctx"])
                        zp = net.predicted_tokens(zc, cc, batch["cond"])
                    dec = net.decoded(zp.data, batch["qry_x"])
                    parts = {"rec": recon_loss(dec, net.normalize_field(batch["qry_v"]))}
                    loss = parts["rec"]
                else:
                    parts = loss_parts(net, batch, cfg, step_seed, with_recon=weights.workflow == "coupled")
                    loss = total_loss(parts, weights)
                if not np.isfinite(loss.data):
                    raise NumericError("non-finite loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NumericError as exc:
                net.load_state_dict(good)
                ckpt = Checkpoint.from_net(net, cfg, history)
                raise DivergenceError(f"training diverged at {stage} epoch {epoch + 1}: {exc}", ckpt) from exc
            w = len(batch_cases)
            sums["total"] += float(loss.data) * w
            for k, v in parts.items():
                sums[k] += float(v.data) * w
        good = net.state_dict()
        row = {"stage": stage, "epoch": epoch + 1, **{k: v / n for k, v in sums.items()}}
        history.append(row)
        log.info("%s epoch %d total %.5f lat %.5f rec %.5f sig %.5f", stage, epoch + 1,
                 row["total"], row["lat"], row["rec"], row["sig"])
        if progress is not None:
            progress(row)


def train(cases: Sequence[Case], config: TrainConfig = TrainConfig(),
          model_config: ModelConfig = ModelConfig(), progress=None, net: Optional[AeroJEPANet] = None) -> tuple:
    """Train on ``cases`` (the training split). Returns ``(checkpoint, history)``.

    Coupled: encoders, predictor and decoder are optimised jointly on
    ``lat + rec + sig``. Decoupled: encoders and predictor are trained on
    ``lat + sig``, then frozen while the decoder learns from predicted latents.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("training needs at least one case")
    if net is None:
        net = AeroJEPANet(model_config, seed=config.seed)
    mean, std = field_statistics(cases)
    net.set_buffers({"field_mean": mean, "field_std": std})
    history: list = []
    weights = config.weights
    if weights.workflow == "coupled":
        _run_stage(net, cases, config, net.parameters(), config.epochs, "coupled", weights, history, progress)
    else:
        latent_params, decoder_params = _param_groups(net)
        _run_stage(net, cases, config, latent_params, config.epochs, "latent", weights, history, progress)
        _run_stage(net, cases, config, decoder_params, config.decoder_epochs or config.epochs, "decoder",
                   weights, history, progress)
    return Checkpoint.from_net(net, config, history), history


# -- inference helpers -----------------------------------------------------------------------
def context_cloud(geometry: PointCloud, n_context: int, seed: int = 0) -> PointCloud:
    """Deterministic FPS subsample of the geometry used at inference."""
    if len(geometry) <= n_context:
        return geometry
    return geometry.subset(fps(geometry, n_context, seed=seed))


def case_predictor(net: AeroJEPANet, case: Case, n_context: int):
    """Encode and predict once for ``case``; return the predicted TokenSet."""
    zc = net.encode_context(context_cloud(case.geometry, n_context))
    return net.predict(zc, case.conditions)


# -- metrics -----------------------------------------------------------------------------------
def case_metrics(pred, truth) -> dict:
    """Six error metrics per channel for one case; ``pred``/``truth`` are ``(Q, C)``."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ")
    e = p - t
    l2_t = np.sqrt(np.sum(t**2, axis=0))
    l1_t = np.sum(np.abs(t), axis=0)
    gtmax = np.max(np.abs(t), axis=0)
    rmse = np.sqrt(np.mean(e**2, axis=0))
    mae = np.mean(np.abs(e), axis=0)
    return {
        "rel_l2": np.sqrt(np.sum(e**2, axis=0)) / l2_t,
        "rel_l1": np.sum(np.abs(e), axis=0) / l1_t,
        "rmse_gtmax": rmse / gtmax,
        "mae_gtmax": mae / gtmax,
        "rmse": rmse,
        "mae": mae,
    }


@dataclass
class MetricReport:
    """Per-case metrics ``per_case[name]`` of shape ``(n_cases, channels)`` with mean/std."""

    channels: tuple
    per_case: dict
    case_ids: list
    resolution: Optional[int] = None

    def mean(self, name: str) -> np.ndarray:
        return self.per_case[name].mean(axis=0)

    def std(self, name: str) -> np.ndarray:
        return self.per_case[name].std(axis=0)

    def rows(self) -> list:
        out = []
        for ci, ch in enumerate(self.channels):
            for name in METRIC_NAMES:
                out.append((ch, name, float(self.mean(name)[ci]), float(self.std(name)[ci])))
        return out

    def table(self) -> str:
        lines = [f"{'field':<8}{'metric':<12}{'mean':>14}{'std':>14}"]
        for ch, name, m, s in self.rows():
            lines.append(f"{ch:<8}{name:<12}{m:>14.6g}{s:>14.6g}")
        return "\n".join(lines)


def metric_report(preds: Sequence, truths: Sequence, channels=("cp",), case_ids=None, resolution=None) -> MetricReport:
    per = [case_metrics(p, t) for p, t in zip(preds, truths)]
    if not per:
        raise ValueError("no cases to evaluate")
    per_case = {name: np.stack([m[name] for m in per]) for name in METRIC_NAMES}
    return MetricReport(tuple(channels), per_case, list(case_ids or range(len(per))), resolution)


def evaluate(net: AeroJEPANet, cases: Sequence[Case], resolutions=None, n_context: int = 256,
             return_predictions: bool = False):
    """Field metrics on ``cases``, encoding and predicting once per case.

    ``resolutions`` is ``None`` (the stored field), an int or a list of ints;
    truth at a new resolution is regenerated analytically and only the decoder
    runs again. Returns one :class:`MetricReport` per resolution (a single
    report when one resolution is requested).
    """
    cases = list(cases)
    if not cases:
        raise ValueError("evaluation split is empty")
    single = resolutions is None or np.isscalar(resolutions)
    res_list = [resolutions] if single else list(resolutions)
    preds = {r: [] for r in res_list}
    truths = {r: [] for r in res_list}
    fields = {r: [] for r in res_list}
    for case in cases:
        zp = case_predictor(net, case, n_context)
        for r in res_list:
            fld = case.field if r is None or r == len(case.field) else make_case(case.design, case.conditions, int(r)).field
            preds[r].append(net.decode(zp, fld.coords))
            truths[r].append(fld.features)
            fields[r].append(fld)
    ids = [c.case_id for c in cases]
    names = cases[0].field.feature_names
    reports = [metric_report(preds[r], truths[r], names, ids, r) for r in res_list]
    out = reports[0] if single else reports
    if return_predictions:
        return out, ({r: (fields[r], preds[r]) for r in res_list})
    return out


# -- latent extraction ---------------------------------------------------------------------------
@dataclass
class LatentTable:
    case_id: np.ndarray
    design_id: np.ndarray
    split: np.ndarray  # 0 train, 1 val, 2 test
    z_ctx: np.ndarray
    z_pred: np.ndarray
    z_tgt: np.ndarray
    design: np.ndarray
    conditions: np.ndarray
    cl: np.ndarray
    cd: np.ndarray

    SPLITS = ("train", "val", "test")

    def __len__(self):
        return len(self.case_id)

    def mask(self, *splits) -> np.ndarray:
        codes = [self.SPLITS.index(s) for s in splits]
        return np.isin(self.split, codes)

    def subset(self, mask) -> "LatentTable":
        return LatentTable(**{k: getattr(self, k)[mask] for k in self.arrays()})

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in ("case_id", "design_id", "split", "z_ctx", "z_pred", "z_tgt",
                                              "design", "conditions", "cl", "cd")}

    @property
    def lift_to_drag(self) -> np.ndarray:
        return self.cl / self.cd


def extract_latents(net: AeroJEPANet, cases: Sequence[Case], manifest=None, n_context: int = 256,
                    n_target: int = 256) -> LatentTable:
    """Pooled context, predicted and target latents with labels, one row per case."""
    from .model import pool_latent

    split_of = {}
    if manifest is not None:
        for code, name in enumerate(LatentTable.SPLITS):
            for cid in manifest.splits.get(name, []):
                split_of[cid] = code
    ctx_cache = {}
    rows = {k: [] for k in ("case_id", "design_id", "split", "z_ctx", "z_pred", "z_tgt", "design",
                            "conditions", "cl", "cd")}
    for case in cases:
        key = case.design_id
        if key not in ctx_cache:
            ctx_cache[key] = net.encode_context(context_cloud(case.geometry, n_context))
        zc = ctx_cache[key]
        zp = net.predict(zc, case.conditions)
        tgt = case.field if len(case.field) <= n_target else case.field.subset(fps(case.field, n_target, seed=0))
        zt = net.encode_target(tgt)
        rows["case_id"].append(case.case_id)
        rows["design_id"].append(case.design_id)
        rows["split"].append(split_of.get(case.case_id, 0))
        rows["z_ctx"].append(pool_latent(zc))
        rows["z_pred"].append(pool_latent(zp))
        rows["z_tgt"].append(pool_latent(zt))
        rows["design"].append(case.design.as_array())
        rows["conditions"].append(case.conditions.as_array())
        rows["cl"].append(case.cl)
        rows["cd"].append(case.cd)
    return LatentTable(**{k: np.asarray(v) for k, v in rows.items()})
