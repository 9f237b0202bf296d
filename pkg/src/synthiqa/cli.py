"""Command-line entry point.

Subcommands: synthesize, agents-score, make-pairs, train, adapt, eval, gmad,
stats. Exit status is 0 on success, 1 for invalid input (bad arguments,
config or data) and 2 for runtime failures. Errors are printed as a single
line ``error[validation]: ...`` or ``error[runtime]: ...`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import AgentLookupError, ConfigurationError, ValidationError

logger = logging.getLogger("synthiqa")


class UsageError(Exception):
    def __init__(self, message, usage):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _floats(s):
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _kv(s):
    if "=" not in s:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {s!r}")
    k, v = s.split("=", 1)
    return k.strip(), v.strip()


def _run_config(args, **flag_overrides):
    from .config import load_config

    overrides = list(getattr(args, "set", None) or [])
    overrides += [(k, str(v)) for k, v in flag_overrides.items() if v is not None]
    return load_config(getattr(args, "config", None), overrides)


# --- subcommands -----------------------------------------------------------


def cmd_synthesize(args):
    from .distortions import SeverityTable, synthesize_corpus

    cfg = _run_config(args, seed=args.seed, severity_table=args.severity_table)
    table = SeverityTable.from_json(cfg.severity_table) if cfg.severity_table else None
    manifest = synthesize_corpus(args.pristine, args.per_image, cfg.seed, args.out, table)
    skipped = sum(1 for r in manifest.records if r.distorted is None)
    print(f"wrote {len(manifest.distorted)} distorted images to {args.out} ({skipped} skipped)")


def _builtin_agents(names):
    from .agents import get_agent

    return [get_agent(n) for n in names]


def cmd_agents_score(args):
    from .agents import score_manifest, write_score_table
    from .distortions import read_manifest

    cfg = _run_config(args, agents=args.agents)
    agents = _builtin_agents(cfg.agents)
    manifest = read_manifest(args.manifest)
    scores = score_manifest(manifest, agents)
    write_score_table(args.out, agents, scores)
    print(f"scored {len(next(iter(scores.values())))} images with {', '.join(a.name for a in agents)}")


def cmd_make_pairs(args):
    from .agents import external_agent, read_score_table
    from .distortions import read_manifest
    from .pairs import label_pairs, sample_pairs, write_pairs

    cfg = _run_config(args, seed=args.seed, agents=args.agents)
    manifest = read_manifest(args.manifest)
    if args.scores:
        agents = read_score_table(args.scores)
    else:
        agents = _builtin_agents(cfg.agents)
    agents += [external_agent(p) for p in args.external or []]
    rng = np.random.default_rng(cfg.seed)
    pairs = sample_pairs(manifest, args.n, type_mix=args.mix, rng=rng)
    records = label_pairs(pairs, agents, keep_scores=args.keep_scores)
    if not records:
        raise ValidationError("every pair was dropped during labeling")
    write_pairs(records, args.out)
    print(f"wrote {len(records)} pairs ({len(pairs) - len(records)} dropped) to {args.out}")


def cmd_train(args):
    from .trainer import load_checkpoint, pretrain, save_checkpoint

    cfg = _run_config(args, seed=args.seed)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
    state = pretrain(args.pairs, cfg.train_config(), state=state, log_path=args.log, dump_dir=args.dump_dir)
    save_checkpoint(state, args.out)
    print(f"pretrained {state.epoch} epochs; checkpoint written to {args.out}")


def cmd_adapt(args):
    from .trainer import adapt, load_checkpoint, save_checkpoint

    state = load_checkpoint(args.ckpt)
    config = None
    if args.config or args.set or args.seed is not None:
        # settings for the adaptation phase; unset keys keep the checkpoint's values
        cfg = _run_config(args, seed=args.seed)
        merged = state.config.to_dict()
        merged["weights"] = dict(merged["weights"])
        for k, v in cfg.values.items():
            if k in merged["weights"]:
                merged["weights"][k] = v
            elif k in merged:
                merged[k] = v
        from .trainer import TrainConfig

        config = TrainConfig.from_dict(merged)
    state = adapt(state, args.pairs, args.target, config, log_path=args.log, dump_dir=args.dump_dir)
    save_checkpoint(state, args.out)
    print(f"adapted {state.epoch} epochs; checkpoint written to {args.out}")


def cmd_eval(args):
    from .evaluation import read_labels, report
    from .trainer import checkpoint_digest, load_checkpoint

    state = load_checkpoint(args.ckpt)
    labels = read_labels(args.labels)
    meta = {"checkpoint_sha256": checkpoint_digest(args.ckpt), "phase": state.phase, "epoch": state.epoch}
    rep = report(state.model, labels, state.reliability, list(state.agent_ids), meta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_json(), encoding="utf-8")
    print(f"SRCC {rep.srcc:.4f}  PLCC {rep.plcc:.4f}  (n = {rep.n}); report written to {out}")


def _pool_scores(source, pool_paths):
    """Scores of the pool under a checkpoint or an external score file."""
    from .agents import external_agent
    from .errors import CheckpointError
    from .imaging import load_image
    from .model import predict_scores
    from .trainer import load_checkpoint

    source, _, selector = str(source).partition("#")
    source = Path(source)
    try:
        state = load_checkpoint(source)
    except CheckpointError:
        state = None
    if state is not None:
        pred = predict_scores(state.model, [load_image(p) for p in pool_paths])
        return {str(p): float(s) for p, s in zip(pool_paths, pred)}
    agent = _table_agent(source, selector) or external_agent(source)
    # lower-is-better scores are negated so that higher always means better
    sign = 1.0 if agent.polarity.value == "higher_is_better" else -1.0
    return {str(p): sign * agent.score(None, p) for p in pool_paths}


def _table_agent(path, selector):
    """An agent from an ``agents-score`` table (``FILE#NAME`` picks one), else None."""
    from .agents import SCORE_TABLE_FORMAT, read_score_table

    try:
        is_table = json.loads(Path(path).read_text(encoding="utf-8")).get("format") == SCORE_TABLE_FORMAT
    except (OSError, ValueError, AttributeError):
        return None
    if not is_table:
        return None
    agents = {a.name: a for a in read_score_table(path)}
    if selector:
        if selector not in agents:
            raise ValidationError(f"{path} has no agent {selector!r}; it holds {sorted(agents)}")
        return agents[selector]
    if len(agents) != 1:
        raise ValidationError(f"{path} holds several agents {sorted(agents)}; pick one with {path}#NAME")
    return next(iter(agents.values()))


def _grid(paths, out_path):
    from PIL import Image

    ims = [Image.open(p).convert("RGB") for p in paths]
    h = max(im.height for im in ims)
    gap = 8
    canvas = Image.new("RGB", (sum(im.width for im in ims) + gap * (len(ims) - 1), h), (255, 255, 255))
    x = 0
    for im in ims:
        canvas.paste(im, (x, 0))
        x += im.width + gap
    canvas.save(out_path, format="PNG")


def cmd_gmad(args):
    from .evaluation import GMADQuery, gmad_pairs
    from .imaging import list_images

    if str(args.defender) == str(args.attacker):
        raise ValidationError("defender and attacker must be different models")
    pool = [p.resolve() for p in list_images(args.pool)]
    if len(pool) < 2:
        raise ValidationError(f"gMAD pool {args.pool} has fewer than two images")
    d_scores = _pool_scores(args.defender, pool)
    a_scores = _pool_scores(args.attacker, pool)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for level in args.levels:
        q = GMADQuery(str(args.defender), str(args.attacker), level, args.tolerance)
        r = gmad_pairs(d_scores, a_scores, q)
        grid = out / f"gmad_level_{level:g}.png"
        _grid([r.img_a, r.img_b], grid)
        results.append(
            {
                "level": level,
                "defender": Path(args.defender).name,
                "attacker": Path(args.attacker).name,
                "img_a": Path(r.img_a).name,
                "img_b": Path(r.img_b).name,
                "defender_a": d_scores[r.img_a],
                "defender_b": d_scores[r.img_b],
                "attacker_gap": r.attacker_gap,
                "anchor": r.anchor,
                "tolerance": r.tolerance,
                "band_size": r.band_size,
                "grid": grid.name,
            }
        )
    (out / "gmad.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for r in results:
        print(f"level {r['level']:g}: {r['img_a']} vs {r['img_b']} (attacker gap {r['attacker_gap']:.4g})")


def cmd_stats(args):
    from .pairs import agreement_histogram, full_agreement_fraction, read_pairs

    records = read_pairs(args.pairs)
    if not records:
        raise ValidationError(f"{args.pairs} holds no pairs")
    counts = agreement_histogram(records)
    total = int(counts.sum())
    pct = counts / total * 100.0
    print(f"pairs: {total}  agents: {records[0].M} ({', '.join(records[0].agent_ids)})")
    for k, (c, p) in enumerate(zip(counts, pct)):
        print(f"{k} positive: {int(c):8d}  {p:6.2f}%")
    print(f"total: {pct.sum():.1f}%")
    print(f"full agreement: {100 * full_agreement_fraction(counts):.2f}%")
    types = np.bincount([r.pair_type for r in records], minlength=5)[1:]
    print("pair types: " + "  ".join(f"{t + 1}: {100 * c / total:.2f}%" for t, c in enumerate(types)))


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .config import describe_keys

    p = _Parser(prog="synthiqa", description="Opinion-free blind image quality training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=Path, help="flat key = value config file")
            sp.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE",
                            help="override a config key (repeatable; wins over --config)")

    s = sub.add_parser("synthesize", help="distort pristine images into a corpus")
    s.add_argument("--pristine", type=Path, required=True)
    s.add_argument("--per-image", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--severity-table", type=Path, help="JSON override of the severity table")
    common(s)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("agents-score", help="score a corpus with full-reference agents")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--agents", help="comma-separated built-in agents (default gmsd,mdsi,srsim)")
    s.add_argument("--out", type=Path, required=True)
    common(s)
    s.set_defaults(func=cmd_agents_score)

    s = sub.add_parser("make-pairs", help="sample and pseudo-label image pairs")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--mix", type=_floats, default=[0.11, 0.49, 0.28, 0.12])
    s.add_argument("--seed", type=int)
    s.add_argument("--agents", help="comma-separated built-in agents")
    s.add_argument("--scores", type=Path, help="score table from agents-score (instead of live agents)")
    s.add_argument("--external", type=Path, action="append", help="external agent score file (repeatable)")
    s.add_argument("--keep-scores", action="store_true", help="store raw agent scores for audit")
    s.add_argument("--out", type=Path, required=True)
    common(s)
    s.set_defaults(func=cmd_make_pairs)

    epilog = "config keys (paper preset defaults):\n" + describe_keys()
    s = sub.add_parser("train", help="phase 1: pretrain on labeled pairs", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--pairs", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", type=Path, help="continue from a pretraining checkpoint")
    s.add_argument("--log", type=Path, help="per-step CSV log")
    s.add_argument("--dump-dir", type=Path, help="where to write the batch dump if training diverges")
    common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("adapt", help="phase 2: adapt to an unlabeled target set", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--pairs", type=Path, required=True)
    s.add_argument("--target", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--log", type=Path)
    s.add_argument("--dump-dir", type=Path)
    common(s)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="SRCC / PLCC report against a labels CSV (path,mos)")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--labels", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gmad", help="gMAD pair search between two models")
    s.add_argument("--pool", type=Path, required=True)
    s.add_argument("--defender", required=True, help="checkpoint, external score file, or score table (FILE#AGENT)")
    s.add_argument("--attacker", required=True, help="checkpoint, external score file, or score table (FILE#AGENT)")
    s.add_argument("--levels", type=_floats, default=[0.1, 0.9], help="defender-score quantiles")
    s.add_argument("--tolerance", type=float, help="defender-score tolerance (default 1%% of range)")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_gmad)

    s = sub.add_parser("stats", help="agreement histogram of a pair file")
    s.add_argument("--pairs", type=Path, required=True)
    s.set_defaults(func=cmd_stats)
    return p


_VALIDATION = (ValidationError, ConfigurationError, AgentLookupError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required", parser.format_usage())
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        print(f"error[validation]: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except _VALIDATION as exc:
        print(f"error[validation]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        logger.debug("runtime failure", exc_info=True)
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"error[runtime]: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
