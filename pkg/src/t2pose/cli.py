"""Command-line entry point: ``t2pose <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("t2pose")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t2pose", description="Text-to-pose generation toolkit.")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="write a synthetic (caption, pose) corpus as JSON lines")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", type=float, help="also write <out>.train.jsonl / <out>.eval.jsonl")

    s = sub.add_parser("train-t2p", help="train the text-to-pose transformer")
    s.add_argument("--corpus", required=True, help="training records (JSON lines)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--lr", type=float, default=3e-4)
    s.add_argument("--grad-clip", type=float, default=1.0)
    s.add_argument("--cosine-lr", action="store_true")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--d-model", type=int, default=128)
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--mixtures", type=int, default=6)

    s = sub.add_parser("train-clapp", help="train the contrastive text/pose scorer")
    s.add_argument("--corpus", required=True)
    s.add_argument("--eval", help="held-out records for retrieval accuracy")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--lr", type=float, default=3e-4)
    s.add_argument("--grad-clip", type=float, default=1.0)
    s.add_argument("--cosine-lr", action="store_true")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--d-joint", type=int, default=64)

    s = sub.add_parser("generate", help="generate a pose for a prompt")
    s.add_argument("--checkpoint", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--prompt")
    g.add_argument("--features", help="precomputed text features (container file, tensor 'features')")
    s.add_argument("--caption", help="caption stored with --features input")
    s.add_argument("--temp", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--candidates", type=int, default=1024)
    s.add_argument("--num", type=int, default=1, help="number of poses")
    s.add_argument("--threshold-exists", action="store_true", help="existence by p >= 0.5 instead of sampling")
    s.add_argument("--out", required=True, help="output JSON lines")
    s.add_argument("--svg", help="render the first pose to this SVG file")

    s = sub.add_parser("score", help="all-pairs CLaPP score matrix for a set of records")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--records", required=True)
    s.add_argument("--out-csv", required=True)
    s.add_argument("--out-svg", help="heatmap")

    s = sub.add_parser("benchmark", help="generated vs nearest-neighbour poses, scored by CLaPP")
    s.add_argument("--t2p", required=True, help="T2P checkpoint")
    s.add_argument("--clapp", required=True, help="CLaPP checkpoint")
    s.add_argument("--train", required=True, help="records searched by the retrieval arm")
    s.add_argument("--eval", required=True, help="held-out prompts")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--temp", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--candidates", type=int, default=1024)
    s.add_argument("--limit", type=int, help="use only the first N eval records")
    s.add_argument("--self-control", action="store_true", help="compare T2P against itself")

    s = sub.add_parser("render", help="render records to SVG (or PNG)")
    s.add_argument("--records", required=True)
    s.add_argument("--out", required=True, help="output file, or directory when --all")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--all", action="store_true")
    s.add_argument("--png", action="store_true")
    s.add_argument("--size", type=int, default=512)

    s = sub.add_parser("tempered-demo", help="tempered-sampling histograms on a 1-D mixture")
    s.add_argument("--weights", type=float, nargs="+", default=[0.7, 0.3])
    s.add_argument("--means", type=float, nargs="+", default=[-2.0, 3.0])
    s.add_argument("--sigmas", type=float, nargs="+", default=[1.0, 1.0])
    s.add_argument("--temps", type=float, nargs="+", default=[1.0, 0.3, 0.05])
    s.add_argument("--n", type=int, default=10_000, help="candidates per tempered draw")
    s.add_argument("--draws", type=int, default=5000, help="tempered draws per temperature")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory for CSV, JSON and SVG")
    return p


def _cmd_synth(a) -> None:
    from .pose import save_records
    from .synth import generate_corpus, split

    corpus = generate_corpus(a.seed, a.size)
    save_records(corpus.records, a.out)
    if a.split is not None:
        train, ev = split(corpus, a.split, seed=a.seed)
        stem = str(Path(a.out).with_suffix(""))
        save_records(train, f"{stem}.train.jsonl")
        save_records(ev, f"{stem}.eval.jsonl")
    log.info("wrote %d records to %s", len(corpus), a.out)


def _train_config(a):
    from .trainer import TrainConfig

    return TrainConfig(steps=a.steps, batch_size=a.batch_size, learning_rate=a.lr, grad_clip=a.grad_clip,
                       seed=a.seed, checkpoint_every=a.checkpoint_every, cosine_lr=a.cosine_lr)


def _cmd_train_t2p(a) -> None:
    from .plotting import plot_loss_curve
    from .pose import load_records
    from .t2p import T2pConfig, T2pModel
    from .trainer import train_t2p

    cfg = _train_config(a)
    model = T2pModel(T2pConfig(n_layers=a.layers, d_model=a.d_model, n_heads=a.heads, K_mixtures=a.mixtures),
                     seed=a.seed)
    res = train_t2p(cfg, load_records(a.corpus), model, out_dir=a.out_dir)
    if res.curve:
        plot_loss_curve([r["step"] for r in res.curve], res.losses(), Path(a.out_dir) / "t2p_loss.svg")
    print(f"trained {cfg.steps} steps in {res.seconds:.1f}s; checkpoint {Path(a.out_dir) / 't2p.ckpt'}")


def _cmd_train_clapp(a) -> None:
    from .clapp import ClappConfig, ClappModel
    from .plotting import plot_loss_curve
    from .pose import load_records
    from .trainer import train_clapp

    cfg = _train_config(a)
    model = ClappModel(ClappConfig(d_joint=a.d_joint), seed=a.seed)
    ev = load_records(a.eval) if a.eval else None
    res = train_clapp(cfg, load_records(a.corpus), model, out_dir=a.out_dir, eval_records=ev)
    if res.curve:
        plot_loss_curve([r["step"] for r in res.curve], res.losses(), Path(a.out_dir) / "clapp_loss.svg")
    if "retrieval_top1" in res.metrics:
        print(f"held-out top-1 retrieval (64 candidates): {res.metrics['retrieval_top1']:.3f}")
    print(f"trained {cfg.steps} steps in {res.seconds:.1f}s; checkpoint {Path(a.out_dir) / 'clapp.ckpt'}")


def _cmd_generate(a) -> None:
    from .pose import PoseRecord, save_records
    from .render import save_svg
    from .t2p import T2pModel
    from .text_features import encode_toy, load_features

    model = T2pModel.load(a.checkpoint)
    if a.prompt is not None:
        feats, caption = encode_toy(a.prompt, model.config.d_text), a.prompt
    else:
        feats = load_features(a.features, expected_dim=model.config.d_text)
        caption = a.caption or Path(a.features).stem
    rng = np.random.default_rng(a.seed)
    gen = model.generate([feats] * a.num, T=a.temp, n_candidates=a.candidates, rng=rng,
                         exist_mode="threshold" if a.threshold_exists else "sample")
    save_records([PoseRecord(caption, p, f"t2p:T={a.temp}:seed={a.seed}:{i}") for i, p in enumerate(gen.poses)],
                 a.out)
    if a.svg:
        save_svg(gen.poses[0], a.svg)


def _cmd_score(a) -> None:
    from .clapp import ClappModel, score_matrix, write_matrix_csv
    from .plotting import plot_score_heatmap
    from .pose import load_records

    model = ClappModel.load(a.checkpoint)
    records = load_records(a.records)
    m = score_matrix(model, records)
    write_matrix_csv(m, [r.caption for r in records], a.out_csv)
    if a.out_svg:
        plot_score_heatmap(m, [r.caption for r in records], a.out_svg)


def _cmd_benchmark(a) -> None:
    from .bench import load_and_run
    from .pose import load_records

    ev = load_records(a.eval)
    if a.limit is not None:
        ev = ev[:a.limit]
    report = load_and_run(a.t2p, a.clapp, load_records(a.train), ev, T=a.temp, seed=a.seed, k=a.k,
                          n_candidates=a.candidates, self_control=a.self_control)
    paths = report.write(a.out_dir)
    s = report.summary()
    print(f"win rate {s['win_rate']:.3f} over {s['n_prompts']} prompts "
          f"(t2p {s['mean_a']:.3f} +- {s['ci_a']:.3f}, {report.label_b} {s['mean_b']:.3f} +- {s['ci_b']:.3f}); "
          f"report {paths['csv']}")


def _cmd_render(a) -> None:
    from .pose import load_records
    from .render import save_png, save_svg

    records = load_records(a.records)
    save = save_png if a.png else save_svg
    ext = "png" if a.png else "svg"
    if a.all:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, r in enumerate(records):
            save(r.pose, out / f"pose_{i:04d}.{ext}", a.size)
        return
    if not 0 <= a.index < len(records):
        raise ValueError(f"--index {a.index} out of range for {len(records)} records")
    save(records[a.index].pose, a.out, a.size)


def _cmd_tempered_demo(a) -> None:
    from .plotting import plot_tempered_demo
    from .tempered import DemoConfig, tempered_demo

    cfg = DemoConfig(weights=tuple(a.weights), means=tuple(a.means), sigmas=tuple(a.sigmas),
                     temps=tuple(a.temps), n_candidates=a.n, n_draws=a.draws, seed=a.seed)
    res = tempered_demo(cfg)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    plot_tempered_demo(res, out / "tempered_demo.svg")
    with open(out / "tempered_demo.csv", "w") as fh:
        fh.write("T,x,density\n")
        for T, dens in res.densities.items():
            for x, d in zip(res.x, dens):
                fh.write(f"{T:g},{x:.6f},{d:.8g}\n")
    summary = {f"{T:g}": {"mean": float(np.mean(s)), "std": float(np.std(s))} for T, s in res.samples.items()}
    (out / "tempered_demo_summary.json").write_text(json.dumps(summary, indent=2) + "\n")


_COMMANDS = {
    "synth": _cmd_synth, "train-t2p": _cmd_train_t2p, "train-clapp": _cmd_train_clapp,
    "generate": _cmd_generate, "score": _cmd_score, "benchmark": _cmd_benchmark,
    "render": _cmd_render, "tempered-demo": _cmd_tempered_demo,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)  # usage errors exit 2 before any file is touched
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"t2pose {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
