"""Command-line entry point.

Subcommands: train, sample, evaluate, select-genes, synth, experiment.
Exit codes are a stable contract: 0 success, 2 usage/config, 3 numeric
failure, 4 I/O or file-format failure. Artifacts carry the resolved config
hash and seed and contain no timestamps, so identical invocations produce
byte-identical numeric payloads.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import config as config_mod
from . import curse, data, metrics
from .errors import (ConfigError, ConstructionError, ContractError,
                     FileFormatError, SamplerDivergenceError, TrainingError,
                     UndefinedMetricError)
from .estimators import (FlagEstimator, JointDiffusionEstimator,
                         NodeOnlyEstimator)
from .flag import GFMEmbeddings

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def estimator_from_config(cfg: dict):
    common = dict(
        sigma_min=cfg["schedule"]["sigma_min"],
        sigma_max=cfg["schedule"]["sigma_max"],
        backbone_hidden=cfg["backbone"]["hidden"],
        backbone_layers=cfg["backbone"]["layers"],
        backbone_heads=cfg["backbone"]["heads"],
        backbone_alpha_init=cfg["backbone"]["alpha_init"],
        backbone_gamma_init=cfg["backbone"]["gamma_init"],
        cond_dim=cfg["backbone"]["cond_dim"],
        edge_channels=tuple(cfg["graph"]["edge_channels"]),
        edge_length_scale=cfg["graph"]["length_scale"],
        train_steps=cfg["train"]["steps"],
        lr=cfg["train"]["lr"],
        weight_decay=cfg["train"]["weight_decay"],
        grad_clip=cfg["train"]["grad_clip"],
        sample_steps=cfg["sample"]["steps"],
        seed=cfg["train"]["seed"],
    )
    mode = cfg["mode"]
    if mode == "flag":
        return FlagEstimator(
            **common,
            dit_hidden=cfg["dit"]["hidden"],
            dit_layers=cfg["dit"]["layers"],
            dit_heads=cfg["dit"]["heads"],
            dit_mlp_ratio=cfg["dit"]["mlp_ratio"],
            gene_dim=cfg["dit"]["gene_dim"],
            align_layer=cfg["dit"]["align_layer"],
            lambda_align=cfg["train"]["lambda_align"],
        )
    if mode == "joint":
        return JointDiffusionEstimator(**common, lambda_c=cfg["train"]["lambda_c"])
    if mode == "node_only":
        return NodeOnlyEstimator(**common)
    raise ConfigError(f"unknown mode {mode!r}")


def _cli_overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "mode", None):
        out["mode"] = args.mode
    train_over = {}
    for key in ("steps", "lr", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            train_over[key] = value
    if train_over:
        out["train"] = train_over
    return out


def _report_line(report) -> tuple[str, str]:
    if dataclasses.is_dataclass(report):
        pairs = dataclasses.asdict(report)
        header = "\t".join(["step", *pairs.keys()])
        return header, "\t".join(repr(v) for v in pairs.values())
    return "step\tloss", repr(float(report))


def cmd_train(args) -> int:
    cfg = config_mod.resolve_config(
        config_mod.load_config_file(args.config) if args.config else None,
        _cli_overrides(args),
    )
    cfg_hash = config_mod.config_hash(cfg)
    slides = [data.load_slide(p) for p in args.data]
    embeddings = None
    if args.embeddings:
        f, valid, tag, names = data.load_gfm_embeddings(
            args.embeddings, expected_gene_names=slides[0].gene_names
        )
        embeddings = GFMEmbeddings(F=f, valid=valid, source_tag=tag)

    est = estimator_from_config(cfg)
    if cfg["mode"] == "flag":
        est.prepare(slides, embeddings=embeddings)
    else:
        if embeddings is not None:
            raise ConfigError("--embeddings only applies to mode=flag")
        est.prepare(slides)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        ck = ckpt_mod.load_checkpoint(args.resume)
        if ck.config_hash != cfg_hash and not args.force:
            raise ConfigError(
                f"checkpoint config hash {ck.config_hash} does not match resolved "
                f"config {cfg_hash}; pass --force to resume anyway"
            )
        ckpt_mod.restore_model(est.model_, ck)
        ckpt_mod.restore_optimizer(est.trainer_.optimizer, ck)
        est.trainer_.step_count = ck.step

    (out_dir / "run_config.txt").write_text(
        f"config_hash: {cfg_hash}\n{config_mod.format_config(cfg)}\n", encoding="utf-8"
    )

    log_path = out_dir / "train_log.tsv"
    every = int(cfg["train"]["checkpoint_every"])
    wrote_header = False

    def save(step: int, name: str):
        ckpt_mod.save_checkpoint(
            out_dir / name, mode=cfg["mode"], step=step, config=cfg,
            config_hash=cfg_hash, model=est.model_, optimizer=est.trainer_.optimizer,
        )

    with open(log_path, "w" if not args.resume else "a", encoding="utf-8") as log:
        def callback(step, report):
            nonlocal wrote_header
            header, line = _report_line(report)
            if not wrote_header and log.tell() == 0:
                log.write(header + "\n")
            wrote_header = True
            log.write(f"{step}\t{line}\n")
            if every > 0 and step % every == 0:
                save(step, f"checkpoint_{step:06d}.ckpt")

        est.train(int(cfg["train"]["steps"]), step_callback=callback)

    save(est.trainer_.step_count, "checkpoint.ckpt")
    print(f"trained {cfg['mode']} for {est.trainer_.step_count} steps -> {out_dir}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ck = ckpt_mod.load_checkpoint(args.checkpoint)
    cfg = ck.config
    slide = data.load_slide(args.data)
    est = estimator_from_config(cfg)
    if cfg["mode"] == "flag":
        proj_key = "align_projector.2.weight"
        embed_dim = ck.tensors[proj_key].shape[0] if proj_key in ck.tensors else None
        est.prepare([slide], embed_dim=embed_dim)
    else:
        est.prepare([slide])
    ckpt_mod.restore_model(est.model_, ck)
    seed = args.seed if args.seed is not None else cfg["sample"]["seed"]
    steps = args.steps if args.steps is not None else cfg["sample"]["steps"]
    pred = est.predict(slide, seed=seed, steps=steps)
    data.save_predictions(args.out, pred, {
        "model": cfg["mode"], "seed": seed, "steps": steps,
        "config_hash": ck.config_hash, "slide_id": slide.slide_id,
        "gene_names": slide.gene_names,
    })
    print(f"sampled {pred.shape[0]}x{pred.shape[1]} -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred, _meta = data.load_predictions(args.pred)
    slide = data.load_slide(args.data)
    domains = None
    if args.domains:
        domains = np.loadtxt(args.domains, dtype=np.int64, ndmin=1)
    report = metrics.evaluate(
        pred, slide.expr, slide.coords, k=args.knn_k, domain_labels=domains
    )
    Path(args.out).write_text(report.to_text(), encoding="utf-8")
    print(
        f"pcc={report.pcc:.4f} mse={report.mse:.4f} "
        f"gsc={report.gsc:.4f} ssc={report.ssc:.4f}"
    )
    return EXIT_OK


def cmd_select_genes(args) -> int:
    slides = [data.load_slide(p) for p in args.data]
    names = slides[0].gene_names
    for s in slides[1:]:
        if s.gene_names != names:
            raise ContractError("slides disagree on the gene panel")
    expr = np.concatenate([s.expr for s in slides], axis=0)
    panel = data.hmhvg_select(expr, names, args.target_g)
    data.save_gene_panel(args.out, panel)
    print(f"selected {len(panel.names)} genes (k_search={panel.k_search}) -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = data.SyntheticSpec(
        N=args.n, G=args.g, cov_kind=args.cov, length_scale=args.length_scale,
        seed=args.seed if args.seed is not None else 0,
        d_visual=args.d_visual, slide_index=args.slide_index,
    )
    sample, a_star = data.synth_slide(spec)
    data.save_slide(args.out, sample)
    if args.astar:
        data.save_matrix(args.astar, a_star, name="spot_covariance")
    print(f"wrote synthetic slide N={spec.N} G={spec.G} -> {args.out}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc


def _write_experiment(out_dir: Path, name: str, params: dict, csv_text: str,
                      summary: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_mod.config_hash({"experiment": name, **params})
    lines = [f"experiment: {name}", f"config_hash: {cfg_hash}"]
    lines += [f"{k}: {v}" for k, v in params.items()]
    lines += [f"{k}: {v}" for k, v in summary.items()]
    (out_dir / f"{name}_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / f"{name}.csv").write_text(csv_text, encoding="utf-8")


def _maybe_plot(args, out_dir: Path, name: str, x, ys: dict, xlabel: str, ylabel: str,
                loglog: bool = False):
    if not getattr(args, "plot", False):
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, y in ys.items():
        ax.plot(x, y, marker="o", label=label)
    if loglog:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"{name}.png", dpi=120)
    plt.close(fig)


def cmd_experiment(args) -> int:
    out_dir = Path(args.out)
    seed = args.seed if args.seed is not None else 0
    if args.kind == "gram":
        res = curse.gram_error_experiment(args.n, args.g, args.trials, seed=seed)
        spread = curse.offdiag_concentration(args.n, args.g, min(args.trials, 2000),
                                             seed=seed)
        rows = ["G,frobenius_sq_error,offdiag_std"]
        for g, s, sp in zip(res.G_values, res.statistic, spread):
            rows.append(f"{g},{s!r},{sp!r}")
        _write_experiment(
            out_dir, "gram",
            {"N": args.n, "G": args.g, "trials": args.trials, "seed": seed},
            "\n".join(rows) + "\n",
            {"slope_loglog": repr(res.slope_loglog), "ci_95": res.ci_95},
        )
        _maybe_plot(args, out_dir, "gram", res.G_values,
                    {"E||A_hat - A*||_F^2": res.statistic}, "G", "error", loglog=True)
    elif args.kind == "fisher":
        res = curse.fisher_scaling(args.n, args.g, args.trials, seed=seed)
        rows = ["G,inv_lambda_min"]
        for g, s in zip(res.G_values, res.statistic):
            rows.append(f"{g},{s!r}")
        _write_experiment(
            out_dir, "fisher",
            {"N": args.n, "G": args.g, "trials": args.trials, "seed": seed},
            "\n".join(rows) + "\n",
            {"slope_loglog": repr(res.slope_loglog), "ci_95": res.ci_95},
        )
        _maybe_plot(args, out_dir, "fisher", res.G_values,
                    {"1/lambda_min": res.statistic}, "G", "Fisher proxy", loglog=True)
    elif args.kind == "sweep":
        configs = curse.default_sweep_configs()
        if args.methods:
            unknown = set(args.methods) - set(configs)
            if unknown:
                raise ConfigError(f"unknown methods {sorted(unknown)}")
            configs = {m: configs[m] for m in args.methods}
        spec = data.SyntheticSpec(N=args.n, seed=seed)
        res = curse.dimension_sweep(
            G_values=args.g, trainer_configs=configs, synth_spec=spec,
            budget=args.budget, seed=seed,
        )
        _write_experiment(
            out_dir, "sweep",
            {"N": args.n, "G": args.g, "budget": args.budget, "seed": seed,
             "methods": sorted(configs)},
            res.to_csv(), {},
        )
        _maybe_plot(args, out_dir, "sweep", list(args.g),
                    {m: [res.pcc(m).get(g, float("nan")) for g in args.g]
                     for m in configs},
                    "G", "PCC")
    elif args.kind == "edges":
        spec = data.SyntheticSpec(N=args.n, G=args.g[0], seed=seed)
        res = curse.edge_ablation(spec, seed=seed, budget=args.budget)
        _write_experiment(
            out_dir, "edges",
            {"N": args.n, "G": args.g[0], "budget": args.budget, "seed": seed},
            res.to_csv(), {},
        )
    else:
        raise ConfigError(f"unknown experiment {args.kind!r}")
    print(f"experiment {args.kind} -> {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flaglab",
        description="Structure-aware spatial expression generation lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a generator on slide files")
    p_train.add_argument("--data", nargs="+", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--config")
    p_train.add_argument("--mode", choices=config_mod.VALID_MODES)
    p_train.add_argument("--steps", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--embeddings")
    p_train.add_argument("--resume")
    p_train.add_argument("--force", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="sample predictions from a checkpoint")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--data", required=True)
    p_sample.add_argument("--out", required=True)
    p_sample.add_argument("--steps", type=int)
    p_sample.add_argument("--seed", type=int)
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("evaluate", help="score predictions against a slide")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--knn-k", type=int, default=8)
    p_eval.add_argument("--domains")
    p_eval.set_defaults(func=cmd_evaluate)

    p_sel = sub.add_parser("select-genes", help="high-mean high-variance panel")
    p_sel.add_argument("--data", nargs="+", required=True)
    p_sel.add_argument("--target-g", type=int, required=True)
    p_sel.add_argument("--out", required=True)
    p_sel.set_defaults(func=cmd_select_genes)

    p_synth = sub.add_parser("synth", help="generate a synthetic slide")
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--g", type=int, required=True)
    p_synth.add_argument("--cov", default="spatial_rbf",
                         choices=("identity", "spatial_rbf", "block"))
    p_synth.add_argument("--length-scale", type=float, default=150.0)
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--d-visual", type=int, default=32)
    p_synth.add_argument("--slide-index", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--astar")
    p_synth.set_defaults(func=cmd_synth)

    p_exp = sub.add_parser("experiment", help="concentration and sweep experiments")
    p_exp.add_argument("kind", choices=("gram", "fisher", "sweep", "edges"))
    p_exp.add_argument("--n", type=int, default=16)
    p_exp.add_argument("--g", type=_int_list, default=[32, 64, 128, 256, 512, 1024, 2048])
    p_exp.add_argument("--trials", type=int, default=200)
    p_exp.add_argument("--budget", type=int, default=2000)
    p_exp.add_argument("--methods", type=lambda s: s.split(","), default=None)
    p_exp.add_argument("--seed", type=int)
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--plot", action="store_true")
    p_exp.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, SamplerDivergenceError, UndefinedMetricError,
            ConstructionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileFormatError, OSError) as exc:
        print(f"io failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
