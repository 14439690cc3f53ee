"""Command-line surface: train targets, serve oracles, attack, post-process,
evaluate.

Exit codes: 0 success, 2 usage error, 3 budget/IO error, 4 numerical
failure. Every run writes its fully-resolved configuration next to its
outputs under the fixed layout models/ reports/ history/ images/.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import config as config_mod
from . import data, evaluate, nn, oracle, postproc, server, targets

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


def _out_dirs(out):
    out = Path(out)
    for sub in ("models", "reports", "history", "images"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path, cfg):
    """IDX pair directory or labeled image-folder tree."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset path {p} does not exist")
    idx_img = p / "train-images-idx3-ubyte"
    idx_lbl = p / "train-labels-idx1-ubyte"
    if idx_img.exists() or idx_img.with_suffix(".gz").exists():
        img = idx_img if idx_img.exists() else idx_img.with_suffix(".gz")
        lbl = idx_lbl if idx_lbl.exists() else idx_lbl.with_suffix(".gz")
        train = data.load_idx(img, lbl, "train")
        t_img = p / "t10k-images-idx3-ubyte"
        t_lbl = p / "t10k-labels-idx1-ubyte"
        if t_img.exists():
            test = data.load_idx(t_img, t_lbl, "test")
        else:
            train, test = data.split_train_test(train, cfg["test_fraction"], cfg["seed"])
        return train, test
    folder = data.load_image_folder(p, (cfg["resize_h"], cfg["resize_w"]))
    return data.split_train_test(folder, cfg["test_fraction"], cfg["seed"])


def cmd_train_target(args):
    overrides = {"epochs": args.epochs, "seed": args.seed, "dp_clip": args.dp_clip,
                 "dp_noise": args.dp_noise, "lr": args.lr}
    cfg = config_mod.resolve(args.config, overrides)
    out = _out_dirs(args.out)
    train, test = _load_dataset(args.dataset, cfg)
    spec = targets.build_target(args.model, train.input_dim, train.num_classes)
    if cfg["dp_clip"] > 0:
        model, report = targets.train_target_noisy(
            spec, train, test, epochs=cfg["epochs"], clip_norm=cfg["dp_clip"],
            noise_multiplier=cfg["dp_noise"], seed=cfg["seed"],
            batch_size=cfg["train_batch_size"], lr=cfg["dp_lr"])
    else:
        model, report = targets.train_target(
            spec, train, test, epochs=cfg["epochs"], seed=cfg["seed"],
            batch_size=cfg["train_batch_size"], optimizer=cfg["optimizer"],
            lr=cfg["lr"] or None)
    model_path = out / "models" / f"{args.model}.gmdl"
    nn.save(model, model_path)
    record = report.record(args.model)
    if cfg["dp_clip"] > 0:
        record.update({"dp_clip": cfg["dp_clip"], "dp_noise": cfg["dp_noise"],
                       "dp_steps": cfg["epochs"] * -(-len(train) // cfg["train_batch_size"])})
    (out / "reports" / f"{args.model}_train.json").write_text(
        json.dumps(record, indent=2) + "\n")
    config_mod.dump(cfg, out / "reports" / f"{args.model}_train.config")
    print(json.dumps(record))
    print(f"model written to {model_path}")
    return 0


def cmd_serve(args):
    model = nn.load(args.model)
    try:
        srv = server.serve(model, args.bind)
    except OSError as exc:
        print(f"cannot bind {args.bind}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"serving {args.model} on {args.bind} "
          f"(dim={model.spec.input_dim}, classes={model.spec.output_dim})")
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.shutdown()
        srv.server_close()
    print("shut down")
    return 0


def _parse_oracle(spec_str, budget, input_dim, decimals):
    kind, _, rest = spec_str.partition(":")
    if kind == "local":
        model = nn.load(rest)
        return oracle.local_oracle(model, budget, round_decimals=decimals)
    if kind == "remote":
        if input_dim is None:
            raise UsageError("remote oracles need --input-dim")
        return oracle.remote_oracle(rest, budget, input_dim=input_dim,
                                    round_decimals=decimals)
    raise UsageError(f"--oracle must be local:<path> or remote:<host:port>, "
                     f"got {spec_str!r}")


def cmd_attack(args):
    overrides = {"budget": args.budget, "seed": args.seed, "max_steps": args.max_steps}
    cfg = config_mod.resolve(args.config, overrides)
    out = _out_dirs(args.out)
    handle = _parse_oracle(args.oracle, cfg["budget"], args.input_dim, args.round)
    acfg = attack_mod.AttackConfig(
        **{k: cfg[k] for k in config_mod.ATTACK_KEYS})
    if handle.num_classes is not None and not 0 <= args.label < handle.num_classes:
        raise UsageError(f"label {args.label} outside oracle's "
                         f"{handle.num_classes} classes")
    log = None
    if args.verbose:
        log = lambda step, ln, lg, k, m, fid, ca: print(
            f"step {step:6d}  Lnoise {ln:.4f}  Lgen {lg:.4f}  k {k:.4f}  "
            f"m {m:.4f}  fid {fid:.4f}  comb {ca:.4f}", flush=True)
    report = attack_mod.gamin_attack(handle, args.label, acfg, log=log)
    paths = report.save(out, tag=args.tag)
    config_mod.dump(cfg, out / "reports" / f"{args.tag}_label{args.label}.config")
    print(json.dumps(report.summary()))
    print(f"report written to {paths['report']}")
    return 0


def cmd_postprocess(args):
    overrides = {"samples": args.samples, "seed": args.seed,
                 "blur_sigma": args.blur_sigma, "edge": args.edge,
                 "presence_threshold": args.presence_threshold}
    cfg = config_mod.resolve(args.config, overrides)
    generator = nn.load(args.generator)
    side = int(round(generator.spec.output_dim ** 0.5))
    if args.channels * side * side != generator.spec.output_dim:
        side = int(round((generator.spec.output_dim / args.channels) ** 0.5))
    shape = (args.channels, side, generator.spec.output_dim // (args.channels * side))
    rcfg = postproc.ReconstructionConfig(
        samples=cfg["samples"], presence_threshold=cfg["presence_threshold"],
        presence_percentile=cfg["presence_percentile"],
        blur_sigma=cfg["blur_sigma"], blur_kernel=cfg["blur_kernel"],
        edge=cfg["edge"], normalize_output=cfg["normalize_output"],
        seed=cfg["seed"], image_shape=shape)
    image = postproc.postprocess(generator, rcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    postproc.save_png(image, out)
    config_mod.dump(cfg, out.with_suffix(".config"))
    print(f"reconstruction written to {out}")
    return 0


_LABEL_RE = re.compile(r"(\d+)")


def cmd_evaluate(args):
    judge = nn.load(args.judge)
    rec_dir = Path(args.reconstructions)
    if not rec_dir.is_dir():
        raise FileNotFoundError(f"{rec_dir} is not a directory")
    images = {}
    for f in sorted(rec_dir.glob("*.png")):
        m = _LABEL_RE.search(f.stem)
        if not m:
            print(f"warning: cannot parse a label out of {f.name}; skipped",
                  file=sys.stderr)
            continue
        images[int(m.group(1))] = postproc.load_png(f)
    if not images:
        print("warning: no reconstructions found; emitting empty table",
              file=sys.stderr)
    results = {}
    proxy = evaluate.SurveyProxyReport()
    for label, img in sorted(images.items()):
        pred, conf, correct = evaluate.judge_reconstruction(judge, img, label)
        results[label] = (pred, conf, correct)
        proxy.add(label, pred, conf, correct)
    header = "label,judge_pred,judge_confidence,judge_correct\n"
    rows = "".join(f"{l},{r[0]},{r[1]:.6g},{r[2]}\n" for l, r in sorted(results.items()))
    summary = (f"\naverage_correct,{proxy.average_correct:.6g}\n"
               f"majority_count,{proxy.majority_count}\n")
    text = header + rows + summary
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="gamin",
        description="Query-budgeted black-box model inversion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-target", help="train one of the reference classifiers")
    t.add_argument("--model", required=True,
                   choices=[m.value for m in targets.TargetName])
    t.add_argument("--dataset", required=True,
                   help="IDX directory or class-per-subdirectory image folder")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--dp-clip", dest="dp_clip", type=float, default=None,
                   help="per-example gradient clip norm (enables noisy SGD)")
    t.add_argument("--dp-noise", dest="dp_noise", type=float, default=None,
                   help="noise multiplier for noisy SGD")
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_target)

    s = sub.add_parser("serve", help="serve a model over the oracle wire protocol")
    s.add_argument("--model", required=True)
    s.add_argument("--bind", default="127.0.0.1:7501")
    s.set_defaults(func=cmd_serve)

    a = sub.add_parser("attack", help="run the inversion attack on one label")
    a.add_argument("--oracle", required=True,
                   help="local:<model path> or remote:<host:port>")
    a.add_argument("--label", type=int, required=True)
    a.add_argument("--budget", type=int, default=None)
    a.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--input-dim", dest="input_dim", type=int, default=None,
                   help="oracle input dimension (required for remote oracles)")
    a.add_argument("--round", type=int, default=None,
                   help="confidence-rounding defense decimals (simulation)")
    a.add_argument("--config", default=None)
    a.add_argument("--tag", default="attack")
    a.add_argument("--verbose", action="store_true")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    pp = sub.add_parser("postprocess", help="reconstruct a class image from a generator")
    pp.add_argument("--generator", required=True)
    pp.add_argument("--samples", type=int, default=None)
    pp.add_argument("--seed", type=int, default=None)
    pp.add_argument("--blur-sigma", dest="blur_sigma", type=float, default=None)
    pp.add_argument("--edge", choices=postproc.EDGE_KINDS, default=None)
    pp.add_argument("--presence-threshold", dest="presence_threshold",
                    type=float, default=None)
    pp.add_argument("--channels", type=int, default=1)
    pp.add_argument("--config", default=None)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_postprocess)

    e = sub.add_parser("evaluate", help="judge reconstructions with a held-out classifier")
    e.add_argument("--judge", required=True)
    e.add_argument("--reconstructions", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, config_mod.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except oracle.BudgetExhausted as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, nn.ContainerError, data.IdxFormatError,
            oracle.OracleTransportError, oracle.OracleProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except nn.EngineError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
