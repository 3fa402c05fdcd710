"""fmplan command line: data generation, training, planning, sequencing and comparisons."""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io, rng
from .autodiff import NonFiniteError
from .config import Config, ConfigError, load_config
from .domain import build_case
from .evaluation import dose_metrics, plan_metrics
from .experiments import SUMMARY_FIELDS, compare, make_flex, pvalues_vs, summarize
from .fmd.diffusion import Denoiser, DivergenceError, NoiseSchedule, TrainResult, train_teacher
from .fmd.distill import DistillResult, Generator, distill
from .l2plan.planner import MetaTrainResult, RolloutError, meta_train, plan
from .leafseq import sequence_plan, validate_deliverability
from .metrics import dvh
from .optim import Adam

log = logging.getLogger("fmplan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MAPS_FILE = "maps.fmpl"


class UsageError(ValueError):
    pass


# checkpoint helpers

def _pack(prefix: str, tensors: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in tensors.items()}


def _unpack(prefix: str, tensors: dict) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def _schedule_meta(s: NoiseSchedule) -> dict:
    return {"sigma_min": s.sigma_min, "sigma_max": s.sigma_max, "sigma_data": s.sigma_data}


def _opt_state(prefix: str, opt: Adam | None) -> dict:
    return _pack(prefix, opt.state()) if opt is not None else {}


def _restore_opt(params: dict, tensors: dict, prefix: str, k: int, lr: float) -> Adam:
    opt = Adam(params, lr=lr)
    state = _unpack(prefix, tensors)
    if state:
        opt.load_state(state, k)
    return opt


def _load_kind(path, kind: str) -> tuple[dict, dict]:
    tensors, meta = io.load_checkpoint(path)
    if meta.get("kind") != kind:
        raise io.DataError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    return tensors, meta


def save_teacher(path, res: TrainResult, seed: int) -> None:
    meta = {"kind": "teacher", "schedule": _schedule_meta(res.model.schedule), "seed": seed,
            "losses": res.losses, "adam_k": res.optimizer.k if res.optimizer else 0}
    io.save_checkpoint(path, {**_pack("model.", res.model.params), **_opt_state("opt.", res.optimizer)}, meta)


def load_teacher(path, lr: float = 1e-4) -> TrainResult:
    tensors, meta = _load_kind(path, "teacher")
    model = Denoiser(_unpack("model.", tensors), NoiseSchedule(**meta["schedule"]))
    opt = _restore_opt(model.params, tensors, "opt.", meta.get("adam_k", 0), lr)
    return TrainResult(model, list(meta.get("losses", [])), opt)


def save_generator(path, res: DistillResult, seed: int) -> None:
    tensors = {**_pack("G.", res.generator.params), **_pack("fake.", res.fake.params), **_pack("D.", res.disc)}
    for name, opt in res.opts.items():
        tensors.update(_opt_state(f"opt{name}.", opt))
    meta = {"kind": "generator", "schedule": _schedule_meta(res.generator.schedule), "seed": seed,
            "history": res.history, "adam_k": {k: o.k for k, o in res.opts.items()}}
    io.save_checkpoint(path, tensors, meta)


def load_distill_state(path, cfg: Config) -> DistillResult:
    tensors, meta = _load_kind(path, "generator")
    sched = NoiseSchedule(**meta["schedule"])
    G = Generator(_unpack("G.", tensors), sched)
    fake = Denoiser(_unpack("fake.", tensors), sched)
    disc = _unpack("D.", tensors)
    ks = meta.get("adam_k", {})
    f = cfg.fmd
    opts = {"G": _restore_opt(G.params, tensors, "optG.", ks.get("G", 0), f.generator_lr),
            "fake": _restore_opt(fake.params, tensors, "optfake.", ks.get("fake", 0), f.fake_lr),
            "D": _restore_opt(disc, tensors, "optD.", ks.get("D", 0), f.disc_lr)}
    return DistillResult(G, fake, disc, list(meta.get("history", [])), opts)


def load_generator(path) -> Generator:
    tensors, meta = _load_kind(path, "generator")
    return Generator(_unpack("G.", tensors), NoiseSchedule(**meta["schedule"]))


def save_l2o(path, res: MetaTrainResult, extra: dict) -> None:
    meta = {"kind": "l2o", "history": res.history, "adam_k": res.opt.k if res.opt else 0,
            "validation": res.validation, "best_step": res.best_step, **extra}
    best = _pack("best.", res.best) if res.best is not None else {}
    io.save_checkpoint(path, {**_pack("meta.", res.meta), **best, **_opt_state("opt.", res.opt)}, meta)


def load_l2o(path, lr: float = 1e-3) -> tuple[MetaTrainResult, dict]:
    """Latest weights, optimizer state and validation record; ``.selected`` is what planning uses."""
    tensors, meta = _load_kind(path, "l2o")
    params = _unpack("meta.", tensors)
    opt = _restore_opt(params, tensors, "opt.", meta.get("adam_k", 0), lr)
    best = _unpack("best.", tensors) or None
    return MetaTrainResult(params, list(meta.get("history", [])), opt, best, int(meta.get("best_step", 0)),
                           list(meta.get("validation", []))), meta


# dataset helpers

def _case_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise io.DataError(f"{d} is not a directory")
    files = sorted((d / "cases").glob("*.json")) if (d / "cases").is_dir() else sorted(d.glob("*.json"))
    files = [f for f in files if f.name != "manifest.json"]
    if not files:
        raise io.DataError(f"no case files in {d}")
    return files


def _load_cases(directory, limit: int | None = None):
    files = _case_files(directory)
    return [io.load_case(f) for f in files[:limit]]


def _load_maps(directory) -> np.ndarray:
    p = Path(directory) / MAPS_FILE
    if p.exists():
        return io.load_checkpoint(p)[0]["maps"]
    return np.concatenate([c.reference_plan.fluence for c in _load_cases(directory)])


def _config(args) -> Config:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _positive(name: str, v: int | None) -> None:
    if v is not None and v < 1:
        raise UsageError(f"--{name} must be >= 1")


# commands

def cmd_gen_data(args) -> None:
    cfg = _config(args)
    if args.num_cases < 1:
        raise UsageError("--num-cases must be >= 1")
    out = Path(args.out)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    g = rng.stream(cfg.seed, rng.PHANTOM)
    seeds = [int(s) for s in g.integers(0, 2 ** 31 - 1, size=args.num_cases)]
    maps, ids = [], []
    for i, s in enumerate(seeds):
        case = build_case(s, cfg.machine, cfg.arc, case_id=f"case{i:05d}")
        io.save_case(out / "cases" / f"{case.case_id}.json", case)
        maps.append(case.reference_plan.fluence)
        ids.append(case.case_id)
    io.save_checkpoint(out / MAPS_FILE, {"maps": np.concatenate(maps)}, {"kind": "maps", "cases": ids})
    io.write_json(out / "manifest.json", {"seed": cfg.seed, "num_cases": args.num_cases, "case_seeds": seeds,
                                         "config": cfg.to_dict()})
    print(f"wrote {args.num_cases} cases to {out}")


def _curve_csv(path: Path) -> Path:
    return path.with_suffix(".csv")


def cmd_train_teacher(args) -> None:
    cfg = _config(args)
    f = cfg.fmd
    _positive("steps", args.steps)
    maps = _load_maps(args.data)
    sched = NoiseSchedule(f.sigma_min, f.sigma_max, f.sigma_data)
    resume = load_teacher(args.resume, f.teacher_lr) if args.resume else None
    steps = args.steps or f.teacher_steps
    res = train_teacher(maps, sched, steps, f.teacher_lr, f.batch_size, cfg.seed, resume, log_every=args.log_every)
    out = Path(args.out)
    save_teacher(out, res, cfg.seed)
    io.write_csv(_curve_csv(out), ["step", "loss"], [[i + 1, v] for i, v in enumerate(res.losses)])
    if args.figures:
        from .report import plot_losses

        plot_losses({"denoising": res.losses}, out.with_suffix(".png"), "teacher")
    print(f"teacher after {len(res.losses)} steps, last loss {res.losses[-1]:.4g} -> {out}")


def cmd_distill(args) -> None:
    cfg = _config(args)
    f = cfg.fmd
    _positive("steps", args.steps)
    if not args.teacher:
        raise UsageError("distill needs --teacher")
    teacher = load_teacher(args.teacher).model
    maps = _load_maps(args.data)
    resume = load_distill_state(args.resume, cfg) if args.resume else None
    steps = args.steps or f.distill_steps
    res = distill(teacher, maps, steps, cfg.seed, f.batch_size, f.lambda_dmd, f.lambda_gan,
                  f.fake_updates_per_generator, f.generator_lr, f.fake_lr, f.disc_lr, f.dmd_normalize,
                  f.dmd_sigma_min, resume, log_every=args.log_every)
    out = Path(args.out)
    save_generator(out, res, cfg.seed)
    io.write_csv(_curve_csv(out), ["step", "fake_loss", "loss_d", "loss_g"],
                 [[h["step"], h["fake_loss"], h["loss_d"], h["loss_g"]] for h in res.history])
    if args.figures:
        from .report import plot_losses

        plot_losses({k: [h[k] for h in res.history] for k in ("fake_loss", "loss_d", "loss_g")},
                    out.with_suffix(".png"), "distillation", log_y=False)
    print(f"generator after {len(res.history)} distillation steps -> {out}")


def cmd_train_l2o(args) -> None:
    cfg = _config(args)
    lc = cfg.l2plan
    G = load_generator(args.generator)
    files = _case_files(args.cases)
    n_train = args.limit or lc.train_cases
    cases = [io.load_case(f) for f in files[:n_train]]
    held = [io.load_case(f) for f in files[n_train:n_train + lc.validation_cases]]
    if lc.validation_cases and not held:
        log.warning("no cases left after the training ones; planning will use the latest weights")
    resume = load_l2o(args.resume, lc.meta_lr)[0] if args.resume else None
    k0 = lc.meta_steps if args.meta_steps is None else args.meta_steps
    if k0 < 0:
        raise UsageError("--meta-steps must be >= 0")
    res = meta_train(cases, G, k0, lc.inner_steps, cfg.seed, lc.meta_lr, lc.outer_window, lc.eta, lc.hidden,
                     lc.features, lc.bias_correction, resume, log_every=args.log_every, validation=held,
                     validate_every=lc.validate_every, validate_steps=lc.plan_steps)
    out = Path(args.out)
    save_l2o(out, res, {"eta": lc.eta, "bias_correction": lc.bias_correction, "seed": cfg.seed})
    io.write_csv(_curve_csv(out), ["step", "case_id", "outer_loss", "first_loss", "last_loss"],
                 [[h["step"], h["case"], h["outer_loss"], h["first_loss"], h["last_loss"]] for h in res.history])
    if args.figures and res.history:
        from .report import plot_losses

        plot_losses({"outer": [h["outer_loss"] for h in res.history]}, out.with_suffix(".png"), "meta-training")
    picked = f", planning with step {res.best_step}" if res.best is not None else ""
    print(f"meta-optimizer after {len(res.history)} outer steps{picked} -> {out}")


def _stem_paths(out: Path) -> tuple[Path, Path]:
    base = out.with_suffix("")
    return base.parent / f"{base.name}_trace.csv", base.parent / f"{base.name}_dose"


def cmd_plan(args) -> None:
    cfg = _config(args)
    _positive("steps", args.steps)
    if args.optimizer == "l2o" and not args.l2o:
        raise UsageError("--optimizer l2o needs --l2o CKPT")
    case = io.load_case(args.case)
    G = load_generator(args.generator)
    meta = None
    extra = {}
    if args.optimizer == "l2o":
        mt, extra = load_l2o(args.l2o)
        meta = mt.selected
    flex = make_flex(args.flex, case, cfg.metrics.lambda_flex)
    res = plan(case, G, args.optimizer, meta, args.steps, cfg.seed, flex, cfg.l2plan.lambda_z,
               cfg.l2plan.lambda_mu, extra.get("eta", cfg.l2plan.eta),
               extra.get("bias_correction", cfg.l2plan.bias_correction))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_json(out, {"case_id": case.case_id, "optimizer": args.optimizer, "steps": args.steps,
                        "seed": cfg.seed, "flex": args.flex, "plan": io.plan_to_dict(res.plan),
                        "final_loss": res.final.total})
    trace, dose_dir = _stem_paths(out)
    io.write_trace(trace, res.trace_rows())
    io.write_dose_pgms(dose_dir, res.dose)
    if args.figures:
        from . import report

        base = out.with_suffix("")
        report.plot_losses({"L_plan": [b.total for b in res.trace]}, f"{base}_loss.png", "planning")
        report.plot_fluence(res.plan.fluence, f"{base}_fluence.png")
        report.plot_dose(res.dose, case.target_dose, f"{base}_dose.png", case.phantom.ptv_mask)
        report.plot_dvh(_dvh_curves(case, res.dose, cfg.metrics.dvh_bins), f"{base}_dvh.png")
    print(f"{case.case_id}: L_plan {res.initial.total:.4g} -> {res.final.total:.4g} in {args.steps} steps")


def _dvh_curves(case, dose, bins) -> dict:
    vmax = float(max(dose.max(), case.target_dose.max()))
    p = case.phantom
    curves = {"PTV plan": dvh(dose, p.ptv_mask, bins, vmax), "PTV target": dvh(case.target_dose, p.ptv_mask, bins, vmax)}
    for i, m in enumerate(p.oar_masks):
        curves[f"OAR{i} plan"] = dvh(dose, m, bins, vmax)
        curves[f"OAR{i} target"] = dvh(case.target_dose, m, bins, vmax)
    return curves


def _read_plan(path):
    d = io.read_json(path)
    return io.plan_from_dict(d.get("plan", d))


def cmd_sequence(args) -> None:
    case = io.load_case(args.case)
    p = _read_plan(args.plan)
    sp = sequence_plan(p, case.constraints)
    viol = validate_deliverability(sp, case.constraints)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_json(out, {"case_id": case.case_id, "sequenced": io.sequenced_to_dict(sp),
                        "violations": [[v.kind, v.cp, v.row, v.detail] for v in viol]})
    print(f"{case.case_id}: {len(sp.apertures)} apertures, {len(viol)} violations -> {out}")


def _metric_row(case_id, optimizer, steps, stage, rec, seconds=math.nan):
    return [case_id, optimizer, steps, stage, *(rec[k] for k in ("mae", "mae_ptv", "mae_oars", "psnr", "ssim", "hi",
                                                                 "frechet")), rec.get("loss", math.nan), seconds]


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    case = io.load_case(args.case)
    p = _read_plan(args.plan)
    rows = [_metric_row(case.case_id, "", "", "pre_ls", plan_metrics(case, p.fluence, p.mu, cfg.metrics.dvh_bins))]
    if args.with_ls:
        sp = sequence_plan(p, case.constraints)
        rows.append(_metric_row(case.case_id, "", "", "post_ls",
                                plan_metrics(case, sp.f_ls, sp.mu, cfg.metrics.dvh_bins)))
    io.write_csv(args.out, io.METRICS_HEADER, rows)
    print(f"{case.case_id}: wrote {len(rows)} metric rows -> {args.out}")


def _parse_list(s: str, conv=str) -> list:
    try:
        items = [conv(x) for x in s.split(",") if x]
    except ValueError as exc:
        raise UsageError(f"bad list {s!r}") from exc
    if not items:
        raise UsageError("empty list")
    return items


def cmd_compare(args) -> None:
    cfg = _config(args)
    optimizers = _parse_list(args.optimizers)
    for o in optimizers:
        if o not in ("l2o", "adam", "sgdm", "rmsprop"):
            raise UsageError(f"unknown optimizer {o!r}")
    steps_list = _parse_list(args.steps, int)
    for s in steps_list:
        _positive("steps", s)
    if "l2o" in optimizers and not args.l2o:
        raise UsageError("l2o in --optimizers needs --l2o CKPT")
    cases = _load_cases(args.cases, args.limit)
    G = load_generator(args.generator)
    meta = load_l2o(args.l2o)[0].selected if args.l2o else None
    rows = compare(cases, G, meta, optimizers, steps_list, cfg.seed, args.with_ls, not args.no_timing,
                   cfg.metrics.dvh_bins)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(out, io.METRICS_HEADER, [_metric_row(r["case_id"], r["optimizer"], r["steps"], r["stage"], r,
                                                      r["seconds"]) for r in rows])
    base = out.with_suffix("")
    summary = summarize(rows)
    head = ["optimizer", "steps", "stage", "n"] + [f"{f}_{s}" for f in SUMMARY_FIELDS for s in ("mean", "std")]
    io.write_csv(f"{base}_summary.csv", head, [[r[h] for h in head] for r in summary])
    if "l2o" in optimizers and len(optimizers) > 1:
        pv = pvalues_vs(rows, "l2o")
        io.write_csv(f"{base}_pvalues.csv", ["optimizer", "steps", "stage", "metric", "t", "p"],
                     [[r["optimizer"], r["steps"], r["stage"], r["metric"], r["t"], r["p"]] for r in pv])
    if args.figures:
        from .report import plot_metric_bars

        table = {f"{r['optimizer']}@{r['steps']}{'' if r['stage'] == 'pre_ls' else '+LS'}":
                 {f: (r[f"{f}_mean"], r[f"{f}_std"]) for f in SUMMARY_FIELDS} for r in summary}
        for metric in ("mae", "ssim", "loss"):
            plot_metric_bars(table, metric, f"{base}_{metric}.png")
    for r in summary:
        print(f"{r['optimizer']:>8} {r['steps']:>4} {r['stage']:>7}  loss {r['loss_mean']:.4g}  "
              f"mae {r['mae_mean']:.4g}  ssim {r['ssim_mean']:.4f}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fmplan", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config file")
        if seed:
            p.add_argument("--seed", type=int, default=None)
        return p

    p = common(sub.add_parser("gen-data", help="synthetic cases and the per-CP fluence corpus"))
    p.add_argument("--out", required=True)
    p.add_argument("--num-cases", type=int, default=128)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train-teacher", help="train the diffusion teacher"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_train_teacher)

    p = common(sub.add_parser("distill", help="distill the one-step generator"))
    p.add_argument("--teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_distill)

    p = common(sub.add_parser("train-l2o", help="meta-train the learned optimizer"))
    p.add_argument("--generator", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--meta-steps", type=int)
    p.add_argument("--limit", type=int, help="use only the first N cases")
    p.add_argument("--resume")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_train_l2o)

    p = common(sub.add_parser("plan", help="plan one case"))
    p.add_argument("--case", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--optimizer", choices=("l2o", "adam", "sgdm", "rmsprop"), default="l2o")
    p.add_argument("--l2o")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--flex", choices=("none", "ptv", "oar"), default="none")
    p.add_argument("--out", required=True)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = common(sub.add_parser("sequence", help="leaf-sequence a plan"), seed=False)
    p.add_argument("--case", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sequence)

    p = common(sub.add_parser("evaluate", help="dose metrics of a plan"), seed=False)
    p.add_argument("--case", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--with-ls", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("compare", help="optimizer comparison over a case directory"))
    p.add_argument("--cases", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--l2o")
    p.add_argument("--optimizers", default="l2o,adam")
    p.add_argument("--steps", default="100")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--with-ls", action="store_true")
    p.add_argument("--no-timing", action="store_true", help="write nan in the seconds column")
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_compare)
    return ap


def _fail(code: int, msg: str) -> int:
    print(f"fmplan: error {code}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    except (io.DataError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, str(exc))
    except (DivergenceError, RolloutError, NonFiniteError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
