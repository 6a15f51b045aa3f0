"""Command line entry point: expand, generate, train, eval, check.

Exit codes: 0 success, 1 failed check or evaluation, 2 bad usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import compiler as C
from .checks import SUITES, run_checks
from .data import GENERATORS, SyntheticSpec, generate, load_dataset, save_dataset
from .nets import InventoryError, load_checkpoint
from .training import ConfigError, TrainConfig, default_seed, evaluate_cross_modal, pair_label, train

log = logging.getLogger("m2vae")


class UsageError(Exception):
    pass


def parse_modalities(spec: str) -> tuple[C.Modality, ...]:
    """``a:4:gauss,b:8:bern`` -> modalities (likelihood defaults to gauss)."""
    mods = []
    for item in filter(None, (s.strip() for s in spec.split(","))):
        parts = item.split(":")
        if not 1 <= len(parts) <= 3:
            raise UsageError(f"bad modality spec {item!r}; expected name:dim[:gauss|bern]")
        name = parts[0]
        try:
            dim = int(parts[1]) if len(parts) > 1 else 1
            lik = C.Likelihood(parts[2]) if len(parts) > 2 else C.Likelihood.GAUSSIAN
            mods.append(C.Modality(name, dim, lik))
        except ValueError as exc:
            raise UsageError(f"bad modality spec {item!r}: {exc}") from None
    if not mods:
        raise UsageError("no modalities given")
    return tuple(mods)


def parse_dims(spec: str) -> dict[str, int]:
    return {m.name: m.data_dim for m in parse_modalities(spec)}


def _write(text: str, path: str | None):
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_expand(args) -> int:
    ms = C.ModalitySet(parse_modalities(args.modalities), args.latent_dim)
    try:
        expr = C.expand(args.variant, ms)
    except C.ExpansionError as exc:
        raise UsageError(str(exc)) from None
    _write(C.render(expr, args.format), args.output)
    return 0


def cmd_generate(args) -> int:
    if args.spec:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        doc.setdefault("seed", default_seed())
        spec = SyntheticSpec.from_dict(doc)
    else:
        spec = SyntheticSpec(generator=args.generator, dims=parse_dims(args.dims), latent_dim=args.latent_dim,
                             noise=args.noise, n_samples=args.n, seed=args.seed if args.seed is not None
                             else default_seed(), n_clusters=args.clusters)
    ds = generate(spec)
    save_dataset(ds, args.output)
    log.info("wrote %d samples of %s to %s", ds.n, ",".join(m.name for m in ds.modalities), args.output)
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.plot:
        cfg.plot = True
    if cfg.dataset:
        ds = load_dataset(cfg.dataset)
    elif cfg.synthetic is not None:
        doc = dict(cfg.synthetic)
        doc.setdefault("seed", cfg.seed)
        ds = generate(SyntheticSpec.from_dict(doc))
    else:
        raise ConfigError("config needs either 'dataset' or 'synthetic'")
    result = train(cfg, ds, out_dir=args.out_dir)
    last = result.history[-1]
    print(json.dumps({"steps": last["step"], "objective": last["objective"],
                      "metrics": result.metrics_path, "checkpoint": result.checkpoint_path}))
    return 0


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    ms = bundle.modality_set
    if args.source:
        sources = [tuple(s.split("+")) for s in args.source]
    else:
        sources = [ms.member_names(m) for m in sorted(bundle.encoders)]
    targets = args.target or [ms.modalities[i].name for i in sorted(bundle.decoders)]
    unknown = sorted(({n for src in sources for n in src} | set(targets)) - set(ms.names))
    if unknown:
        raise UsageError(f"unknown modalities {unknown}; checkpoint has {list(ms.names)}")
    pairs, errors = {}, []
    for src in sources:
        for tgt in targets:
            try:
                pairs[pair_label(src, tgt)] = evaluate_cross_modal(bundle, ds, src, tgt)
            except InventoryError as exc:
                errors.append({"error": "encoder not in inventory" if "encoder" in str(exc)
                               else "decoder not in inventory", "source": list(src), "target": tgt})
    metric = {m.name: "mse" if m.likelihood is C.Likelihood.GAUSSIAN else "bce" for m in ms.modalities}
    report = {"variant": bundle.expression.variant.value, "checkpoint": str(args.checkpoint),
              "dataset": str(args.dataset), "metric": metric, "errors": pairs, "failures": errors}
    _write(json.dumps(report, indent=2) + "\n", args.output)
    if args.plot and pairs:
        from .plotting import plot_cross_modal
        png = str(Path(args.output).with_suffix(".png")) if args.output else "cross_modal.png"
        plot_cross_modal(pairs, png)
    return 1 if errors else 0


def cmd_check(args) -> int:
    return 0 if run_checks(args.suite or ["all"]) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2vae", description="Multi-modal VAE objective compiler and trainer")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("expand", help="expand an objective into weighted ELBO terms")
    e.add_argument("--modalities", required=True, help="e.g. a:4:gauss,b:8:bern")
    e.add_argument("--variant", default="m2vae", choices=[v.value for v in C.Variant])
    e.add_argument("--format", default="text", choices=["text", "json", "latex"])
    e.add_argument("--latent-dim", type=int, default=2)
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_expand)

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--spec", help="JSON SyntheticSpec (overrides the flags below)")
    g.add_argument("--generator", default="shared_latent_linear", choices=GENERATORS)
    g.add_argument("--dims", default="a:4,b:4", help="e.g. a:4,b:4")
    g.add_argument("--latent-dim", type=int, default=2)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument("--seed", type=int)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", help="directory for relative output paths")
    t.add_argument("--seed", type=int)
    t.add_argument("--plot", action="store_true", help="also render metrics.png")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="cross-modal reconstruction report")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--dataset", required=True)
    v.add_argument("--source", action="append", help="source subset like a+b (repeatable)")
    v.add_argument("--target", action="append", help="target modality (repeatable)")
    v.add_argument("-o", "--output")
    v.add_argument("--plot", action="store_true", help="also render a heat map PNG")
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run the oracle and invariant suites")
    c.add_argument("--suite", action="append", choices=[*SUITES, "all"])
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, C.ExpansionError, C.ExpressionParseError,
            C.ExpressionSemanticError, FileNotFoundError) as exc:
        print(f"m2vae {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
