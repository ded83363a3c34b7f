"""Command-line interface: ``aerojepa <verb> [options]``.

Verbs: gen, train, eval, latents, probe, walk, interp, optimize. Every verb
writes into a fresh ``--out`` directory (an existing non-empty one needs
``--force``), echoes its resolved config to ``config.txt`` and logs to
``run.log``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import AeroJEPAError
from .experiment import build_dataset, disentanglement_report, force_parity, optimize_design, split_cases
from .io import (
    load_checkpoint, load_dataset, load_latents, load_probes, save_checkpoint, save_dataset,
    save_latents, save_probes,
)
from .latent_lab import (
    concept_vector, concept_walk, decode_walk, interpolate_token_sets, latent_interpolate,
)
from .plotting import write_svg
from .probes import probe_predict
from .synthgen import Conditions
from .training import context_cloud, evaluate, extract_latents, metric_report, train

log = logging.getLogger("aerojepa")

PRODUCERS = {
    "dataset": "gen",
    "checkpoint": "train",
    "latents": "latents",
    "probes": "probe",
}


class CLIError(Exception):
    pass


def _require(path, kind: str) -> Path:
    p = Path(path) if path is not None else None
    marker = p / "manifest.json" if (p is not None and kind == "dataset") else p
    if p is None or not marker.exists():
        raise CLIError(f"missing {kind} at {path!s}: run `aerojepa {PRODUCERS[kind]}` first "
                       f"(or pass the {kind} location with --{'data' if kind == 'dataset' else kind})")
    return p


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not force:
        raise CLIError(f"output path {out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup_logging(out: Path, verbose: bool) -> None:
    root = logging.getLogger("aerojepa")
    root.handlers.clear()
    root.setLevel(logging.INFO)
    fh = logging.FileHandler(out / "run.log", mode="w")
    fh.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(fh)
    if verbose:
        sh = logging.StreamHandler(sys.stderr)
        sh.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(sh)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _load_cfg(args) -> dict:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CLIError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = config_mod._parse_value(v)
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return config_mod.load_config(args.config, args.preset, overrides)
    except KeyError as exc:
        raise CLIError(str(exc.args[0])) from exc


# -- verbs ----------------------------------------------------------------------------------------
def cmd_gen(args, cfg, out):
    cases, manifest = build_dataset(cfg)
    save_dataset(out, cases, manifest, {k: v for k, v in cfg.items() if k.startswith("data.") or k == "seed"})
    counts = {k: len(v) for k, v in manifest.splits.items()}
    log.info("generated %d cases; split sizes %s", len(cases), counts)
    print(f"wrote {len(cases)} cases to {out} (train/val/test cases: "
          f"{counts['train']}/{counts['val']}/{counts['test']})")


def cmd_train(args, cfg, out):
    cases, manifest, _ = load_dataset(_require(args.data, "dataset"))
    tr = split_cases(cases, manifest, "train")
    ckpt, hist = train(tr, config_mod.train_config(cfg), config_mod.model_config(cfg),
                       progress=lambda r: print(f"{r['stage']} epoch {r['epoch']:3d}  total {r['total']:.6f}  "
                                                f"lat {r['lat']:.6f}  rec {r['rec']:.6f}  sig {r['sig']:.4f}",
                                                flush=True))
    save_checkpoint(out / "checkpoint.ajpa", ckpt)
    _write_csv(out / "history.csv", ["stage", "epoch", "total", "lat", "rec", "sig"],
               [[h["stage"], h["epoch"], h["total"], h["lat"], h["rec"], h["sig"]] for h in hist])
    ep = np.arange(1, len(hist) + 1)
    write_svg(out / "loss.svg", [{"x": ep, "y": [h["total"] for h in hist], "label": "total"},
                                 {"x": ep, "y": [h["rec"] for h in hist], "label": "rec"},
                                 {"x": ep, "y": [h["lat"] for h in hist], "label": "lat"}],
              title="training loss", xlabel="epoch", ylabel="loss")
    print(f"wrote {out / 'checkpoint.ajpa'}")


def cmd_eval(args, cfg, out):
    cases, manifest, _ = load_dataset(_require(args.data, "dataset"))
    held = split_cases(cases, manifest, args.split)
    resolutions = list(cfg["eval.resolutions"])
    if args.oracle:
        # truth fed back as prediction; exercises the metric path only
        reports = [metric_report([c.field.features for c in held], [c.field.features for c in held],
                                 ("cp",), [c.case_id for c in held])]
    else:
        net = load_checkpoint(_require(args.checkpoint, "checkpoint")).build()
        reports = evaluate(net, held, resolutions, n_context=cfg["train.n_context"])
        parity = force_parity(net, held, cfg["train.n_context"])
        _write_csv(out / "force_parity.csv", ["case_id", "cl_decoded", "cl_analytic"],
                   zip(parity.case_ids, parity.cl_decoded, parity.cl_analytic))
        write_svg(out / "force_parity.svg",
                  [{"x": parity.cl_analytic, "y": parity.cl_decoded, "kind": "scatter", "label": "cases"},
                   {"x": [parity.cl_analytic.min(), parity.cl_analytic.max()],
                    "y": [parity.cl_analytic.min(), parity.cl_analytic.max()], "label": "parity"}],
                  title=f"C_L parity (r = {parity.correlation:.3f})", xlabel="analytic C_L",
                  ylabel="integrated decoded C_L")
        log.info("force parity correlation %.6f", parity.correlation)
    rows = []
    for rep in reports:
        for ch, name, m, s in rep.rows():
            rows.append([rep.resolution if rep.resolution is not None else "native", ch, name, m, s])
        print(f"resolution {rep.resolution if rep.resolution is not None else 'native'} "
              f"({len(rep.case_ids)} {args.split} cases)")
        print(rep.table())
    _write_csv(out / "metrics.csv", ["resolution", "field", "metric", "mean", "std"], rows)


def cmd_latents(args, cfg, out):
    cases, manifest, _ = load_dataset(_require(args.data, "dataset"))
    net = load_checkpoint(_require(args.checkpoint, "checkpoint")).build()
    table = extract_latents(net, cases, manifest, cfg["train.n_context"], cfg["train.n_target"])
    save_latents(out / "latents.ajpa", table)
    d = table.z_ctx.shape[1]
    header = (["case_id", "design_id", "split", "thickness", "camber", "alpha", "mach", "cl", "cd"]
              + [f"z_ctx_{i}" for i in range(d)] + [f"z_pred_{i}" for i in range(d)]
              + [f"z_tgt_{i}" for i in range(d)])
    rows = []
    for i in range(len(table)):
        rows.append([int(table.case_id[i]), int(table.design_id[i]), table.SPLITS[int(table.split[i])],
                     *table.design[i], *table.conditions[i], table.cl[i], table.cd[i],
                     *table.z_ctx[i], *table.z_pred[i], *table.z_tgt[i]])
    _write_csv(out / "latents.csv", header, rows)
    print(f"wrote {len(table)} latent rows to {out / 'latents.ajpa'}")


def cmd_probe(args, cfg, out):
    from .probes import fit_suites

    table = load_latents(_require(args.latents, "latents"))
    suites, report = fit_suites(table, n_folds=cfg["probe.folds"], seed=cfg["seed"])
    save_probes(out / "probes.ajpa", suites)
    _write_csv(out / "probes.csv", ["family", "target", "lambda", "cv_r2", "heldout_r2", "reliable"],
               [[r["family"], r["target"], r["lambda"], r["cv_r2"], r["heldout_r2"], r["reliable"]] for r in report])
    print(f"{'family':<20}{'target':<12}{'lambda':>10}{'cv_r2':>10}{'heldout_r2':>12}  reliable")
    for r in report:
        print(f"{r['family']:<20}{r['target']:<12}{r['lambda']:>10.0e}{r['cv_r2']:>10.4f}"
              f"{r['heldout_r2']:>12.4f}  {'yes' if r['reliable'] else 'no'}")


def cmd_walk(args, cfg, out):
    table = load_latents(_require(args.latents, "latents"))
    suites = load_probes(_require(args.probes, "probes"))
    closed, numeric = disentanglement_report(table, suites)
    names = closed.targets
    _write_csv(out / "disentanglement.csv", ["walk_direction", *names],
               [[n, *closed.S[i]] for i, n in enumerate(names)])
    _write_csv(out / "disentanglement_numeric.csv", ["walk_direction", *names],
               [[n, *numeric[i]] for i, n in enumerate(names)])
    lo, hi, n = cfg["walk.gammas"]
    gammas = np.linspace(lo, hi, int(n))
    suite = suites["context->design"]
    mu = table.z_ctx[table.mask("train")].mean(axis=0)
    rows, series = [], []
    for tk in names:
        walk = concept_walk(mu, concept_vector(suite, tk), gammas)
        for tj in names:
            y = probe_predict(suite.models[tj], walk)
            rows += [[tk, tj, g, v] for g, v in zip(gammas, y)]
            if tj == tk:
                series.append({"x": gammas, "y": y, "label": f"{tk} along v_{tk}"})
    _write_csv(out / "walk.csv", ["direction", "readout", "gamma", "value"], rows)
    write_svg(out / "walk.svg", series, title="concept walks", xlabel="gamma", ylabel="probe readout")
    print("disentanglement (rows: walk direction, columns: readout, std per unit gamma)")
    print(f"{'':<12}" + "".join(f"{n:>12}" for n in names))
    for i, n in enumerate(names):
        print(f"{n:<12}" + "".join(f"{v:>12.4f}" for v in closed.S[i]))
    print(f"max |closed - numeric| = {np.abs(closed.S - numeric).max():.3e}")


def cmd_interp(args, cfg, out):
    cases, manifest, _ = load_dataset(_require(args.data, "dataset"))
    net = load_checkpoint(_require(args.checkpoint, "checkpoint")).build()
    by_id = {c.case_id: c for c in cases}
    test = split_cases(cases, manifest, "test")
    steps = np.linspace(0.0, 1.0, int(cfg["interp.steps"]))
    n_ctx = cfg["train.n_context"]
    if args.mode == "condition":
        a = by_id[args.case_a] if args.case_a is not None else test[0]
        same = [c for c in cases if c.design_id == a.design_id and c.case_id != a.case_id]
        b = by_id[args.case_b] if args.case_b is not None else (same[0] if same else a)
        if b.design_id != a.design_id:
            raise CLIError("condition interpolation needs two cases of the same design")
        zc = net.encode_context(context_cloud(a.geometry, n_ctx))
        alphas = (1 - steps) * a.conditions.alpha + steps * b.conditions.alpha
        conds = [Conditions(float(al), a.conditions.mach) for al in alphas]
        res = decode_walk(net, [zc] * len(steps), conds, a.field)
        label = "condition (predicted latent, shared context)"
    else:
        a = by_id[args.case_a] if args.case_a is not None else test[0]
        b = by_id[args.case_b] if args.case_b is not None else test[-1]
        za = net.encode_context(context_cloud(a.geometry, n_ctx))
        zb = net.encode_context(context_cloud(b.geometry, n_ctx))
        tok = interpolate_token_sets(za, zb, steps)
        coords = latent_interpolate(a.field.coords, b.field.coords, steps)
        alphas = (1 - steps) * a.conditions.alpha + steps * b.conditions.alpha
        conds = [Conditions(float(al), a.conditions.mach) for al in alphas]
        res = decode_walk(net, tok, conds, list(coords))
        label = "geometry (context latent)"
    _write_csv(out / "interp.csv", ["step", "alpha", "cl_decoded", "cd_pressure_decoded"],
               zip(steps, alphas, res.cl, res.cd_pressure))
    write_svg(out / "interp.svg", [{"x": steps, "y": res.cl, "label": "decoded C_L"},
                                   {"x": [0.0, 1.0], "y": [a.cl, b.cl], "kind": "scatter", "label": "analytic endpoints"}],
              title=f"interpolation: {label}", xlabel="interpolation parameter", ylabel="C_L")
    print(f"{label}: case {a.case_id} -> case {b.case_id}")
    print(f"analytic endpoint C_L: {a.cl:.5f} -> {b.cl:.5f}")
    for s, al, v in zip(steps, alphas, res.cl):
        print(f"  t={s:.2f}  alpha={al:+.4f}  decoded C_L={v:.5f}")


def cmd_optimize(args, cfg, out):
    cases, manifest, _ = load_dataset(_require(args.data, "dataset"))
    net = load_checkpoint(_require(args.checkpoint, "checkpoint")).build()
    table = load_latents(_require(args.latents, "latents"))
    suites = load_probes(_require(args.probes, "probes"))
    oc = optimize_design(net, cases, manifest, table, suites, cfg, cfg["train.n_context"])
    r = oc.result
    rows = []
    for i, (res, z) in enumerate(zip(r.restarts, r.restart_z)):
        cl, cd, _, _ = oc.problem.aero(z)
        rows.append([i, res.f, cl, cd, cl / cd, res.max_violation, res.kkt_residual, res.iterations,
                     res.message, bool(r.feasible[i])])
    _write_csv(out / "restarts.csv", ["restart", "objective", "cl", "cd", "ld", "max_violation", "kkt_residual",
                                      "iterations", "status", "feasible"], rows)
    trace_rows = []
    for i, res in enumerate(r.restarts):
        for k, u in enumerate(res.trace):
            cl, cd, _, _ = oc.problem.aero(oc.problem.region.unwhiten(u))
            trace_rows.append([i, k, cl, cd])
    _write_csv(out / "traces.csv", ["restart", "iteration", "cl", "cd"], trace_rows)
    tr = table.mask("train")
    _write_csv(out / "envelope.csv", ["case_id", "cl", "cd"], zip(table.case_id[tr], table.cl[tr], table.cd[tr]))
    series = [{"x": table.cd[tr], "y": table.cl[tr], "kind": "scatter", "label": "train cases", "color": "#999999"}]
    for i in range(len(r.restarts)):
        sel = [t for t in trace_rows if t[0] == i]
        series.append({"x": [t[3] for t in sel], "y": [t[2] for t in sel], "color": "#1f77b4"})
    series.append({"x": [r.cd], "y": [r.cl], "kind": "scatter", "label": "optimum", "color": "#d62728"})
    write_svg(out / "envelope.svg", series, title="restart traces in the (C_D, C_L) plane", xlabel="C_D", ylabel="C_L")
    summary = {
        "cl": r.cl, "cd": r.cd, "lift_to_drag": r.lift_to_drag, "design": r.design,
        "residuals": r.residuals, "kkt_residual": r.kkt_residual,
        "restarts_near_best": r.n_converged_near_best, "restarts": len(r.restarts),
        "train_ld_p95": oc.envelope.ld_p95, "train_ld_max": oc.envelope.ld_max,
        "nearest_case": oc.nearest_case, "nearest_distance": oc.nearest_distance,
        "nearest_design": {"thickness": oc.nearest_design[0], "camber": oc.nearest_design[1]},
        "nearest_ld_analytic": oc.nearest_ld_analytic, "z_star": r.z_star.tolist(),
    }
    (out / "optimum.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print("design recipe")
    print(f"{'parameter':<12}{'optimum':>12}{'nearest case':>14}{'train min':>12}{'train max':>12}")
    for j, name in enumerate(("thickness", "camber")):
        print(f"{name:<12}{r.design[name]:>12.5f}{oc.nearest_design[j]:>14.5f}"
              f"{oc.envelope.design_lo[j]:>12.5f}{oc.envelope.design_hi[j]:>12.5f}")
    print(f"probed optimum: C_L={r.cl:.5f} C_D={r.cd:.5f} L/D={r.lift_to_drag:.3f} "
          f"(train L/D p95 {oc.envelope.ld_p95:.3f}, max {oc.envelope.ld_max:.3f})")
    print(f"restarts within the neighbourhood of the best: {r.n_converged_near_best}/{len(r.restarts)}")
    print(f"nearest case {oc.nearest_case} (distance {oc.nearest_distance:.4f}), "
          f"analytic L/D at cruise {oc.nearest_ld_analytic:.3f}")
    print(f"max constraint residual {max(r.residuals.values()):.3e}")


VERBS = {
    "gen": (cmd_gen, "generate the synthetic dataset"),
    "train": (cmd_train, "train a model on the training split"),
    "eval": (cmd_eval, "field error metrics and force parity on a split"),
    "latents": (cmd_latents, "extract pooled latents for every case"),
    "probe": (cmd_probe, "fit ridge probe suites on a latent table"),
    "walk": (cmd_walk, "concept walks and the disentanglement matrix"),
    "interp": (cmd_interp, "decode along a latent interpolation"),
    "optimize": (cmd_optimize, "constrained latent design optimisation"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aerojepa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for name, (_, helptext) in VERBS.items():
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="flat dotted-key config file")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
        p.add_argument("--preset", choices=sorted(config_mod.PRESETS), default="desk")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--verbose", action="store_true")
        if name in ("train", "eval", "latents", "interp", "optimize"):
            p.add_argument("--data", help="dataset directory (from `gen`)")
        if name in ("eval", "latents", "interp", "optimize"):
            p.add_argument("--checkpoint", help="checkpoint file (from `train`)")
        if name in ("probe", "walk", "optimize"):
            p.add_argument("--latents", help="latent table (from `latents`)")
        if name in ("walk", "optimize"):
            p.add_argument("--probes", help="probe bundle (from `probe`)")
        if name == "eval":
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
            p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
        if name == "interp":
            p.add_argument("--mode", default="geometry", choices=("geometry", "condition"))
            p.add_argument("--case-a", type=int)
            p.add_argument("--case-b", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
        out = _prepare_out(args.out, args.force)
        _setup_logging(out, args.verbose)
        (out / "config.txt").write_text(config_mod.format_config(cfg))
        log.info("command %s seed %s preset %s", args.verb, cfg["seed"], args.preset)
        for line in config_mod.format_config(cfg).splitlines():
            log.info("config %s", line)
        VERBS[args.verb][0](args, cfg, out)
        log.info("done")
    except (CLIError, AeroJEPAError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
