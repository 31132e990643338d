"""Command-line driver: pretrain, finetune, sample, evaluate.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .descriptors import ExternalScoreTable, compute, fingerprint, load_iter
from .mdp import MolMDP
from .metrics import SampleSet, evaluate
from .molgraph import MolGraph, ValenceError
from .policy import (CheckpointError, CheckpointMismatch, GraphPolicy, load_checkpoint,
                     recalibrate_log_z)
from .reward import aggregate_reward
from .smiles import SmilesError, canonical_key, parse, read_dataset, write
from .trainer import NumericAbort, Trainer, sample_trajectories

log = logging.getLogger("atomgfn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


# -- shared wiring -----------------------------------------------------------------------


def _load_config(path: str | None) -> RunConfig:
    return cfgmod.load(path) if path else RunConfig()


def _tables(cfg: RunConfig) -> dict[str, ExternalScoreTable]:
    out = {}
    for entry in cfg.data.score_tables:
        if "=" not in entry:
            raise ConfigError(f"data.score_tables entry {entry!r} must be PROP=path")
        prop, path = entry.split("=", 1)
        out[prop.strip()] = _read_table(path.strip(), prop.strip())
    return out


def _read_table(path: str, name: str) -> ExternalScoreTable:
    try:
        return ExternalScoreTable.load(path, name)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read score table {path}: {e}") from None


def _reward_fn(cfg: RunConfig, tables, external: ExternalScoreTable | None):
    ring_sizes = cfg.training.ring_sizes or None

    def fn(x: MolGraph, ctx) -> float:
        ext = None
        if external is not None:
            ext = external.values.get(canonical_key(x), 0.0)
        return aggregate_reward(x, ctx, ext, tables, ring_sizes=ring_sizes)
    return fn


def _property_fn(cfg: RunConfig, tables):
    ring_sizes = cfg.training.ring_sizes or None
    return lambda x, ctx: {c.prop: compute(c.prop, x, tables, ring_sizes)
                           for c in ctx.conditionals}


def _policy(cfg: RunConfig) -> GraphPolicy:
    return GraphPolicy(cfg.mdp_config(), cfg.context().encoding_size, cfg.policy_config(),
                       seed=cfg.training.seed)


def _load_params(policy: GraphPolicy, path: str, force: bool):
    try:
        tensors, _, meta = load_checkpoint(path, policy.config_hash(), force, policy.dtype)
    except CheckpointMismatch as e:
        raise ConfigError(str(e)) from None
    except (OSError, CheckpointError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from None
    params = policy.init_params(0)
    for k in params:
        if k not in tensors or tensors[k].shape != params[k].shape:
            raise ConfigError(f"checkpoint {path} has no matching tensor {k}")
        params[k] = tensors[k]
    return params, meta


def _dataset(cfg: RunConfig, strict: bool) -> list[MolGraph]:
    if cfg.data.dataset is None:
        return []
    try:
        rep = read_dataset(cfg.data.dataset, strict=strict, max_nodes=cfg.mdp.max_nodes,
                           max_edges=cfg.mdp.max_edges)
    except OSError as e:
        raise DataError(f"cannot read dataset: {e}") from None
    except SmilesError as e:
        raise DataError(str(e)) from None
    if not rep.molecules:
        raise DataError(f"dataset {cfg.data.dataset} has no usable molecules")
    return [m if cfg.mdp.chirality else m.without_stereo() for m in rep.molecules]


def _scaffold(smiles: str | None, cfg: RunConfig) -> MolGraph | None:
    if not smiles:
        return None
    try:
        g = parse(smiles)
    except SmilesError as e:
        raise DataError(f"seed scaffold {smiles!r}: {e}") from None
    return g if cfg.mdp.chirality else g.without_stereo()


def _make_mdp(cfg: RunConfig, seed: MolGraph | None) -> MolMDP:
    try:
        return MolMDP(cfg.mdp_config(), seed)
    except (ValueError, ValenceError) as e:
        raise DataError(f"seed scaffold does not fit the MDP: {e}") from None


# -- commands ----------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    tcfg = cfg.training
    if tcfg.mix_ratio < 1 and cfg.data.dataset is None:
        raise ConfigError("training.mix_ratio < 1 needs data.dataset")
    tables = _tables(cfg)
    dataset = _dataset(cfg, args.strict or cfg.data.strict)
    mdp = _make_mdp(cfg, None)
    policy = _policy(cfg)
    out = Path(args.out or cfg.io.out_dir)
    try:
        trainer = Trainer(policy, mdp, tcfg.train_config(), cfg.context(), "pretrain",
                          _reward_fn(cfg, tables, None), dataset, out_dir=out,
                          property_fn=_property_fn(cfg, tables))
    except ValueError as e:
        raise DataError(str(e)) from None
    if args.checkpoint:
        _resume(trainer, args.checkpoint, args.force)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    trainer.train()
    trainer.save()
    log.info("pretraining finished at step %d; checkpoint in %s", trainer.step, out)
    return EXIT_OK


def _resume(trainer: Trainer, path: str, force: bool) -> None:
    try:
        trainer.resume(path, force)
    except CheckpointMismatch as e:
        raise ConfigError(str(e)) from None
    except (OSError, CheckpointError) as e:
        raise DataError(f"cannot resume from {path}: {e}") from None


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config)
    tcfg = cfg.training
    objective = args.objective or tcfg.objective
    if objective not in ("tb", "rtb", "task"):
        raise ConfigError(f"unknown objective {objective!r}")
    if objective != "task" and not args.prior:
        raise ConfigError("finetune needs --prior (or --objective task to train from scratch)")
    if tcfg.mix_ratio < 1 and cfg.data.dataset is None:
        raise ConfigError("training.mix_ratio < 1 needs data.dataset")
    tables = _tables(cfg)
    external = _read_table(cfg.data.external_reward, "external") \
        if cfg.data.external_reward else None
    dataset = _dataset(cfg, args.strict or cfg.data.strict)
    scaffold = _scaffold(args.seed_scaffold or tcfg.seed_scaffold, cfg)
    mdp = _make_mdp(cfg, scaffold)
    policy = _policy(cfg)
    prior = None
    if objective != "task":
        prior_params, _ = _load_params(policy, args.prior, args.force)
        params = prior_params.copy()
        recalibrate_log_z(params, tcfg.logz_sigma, np.random.default_rng(tcfg.seed))
        policy = policy.with_params(params)
        if objective == "rtb":
            prior = policy.with_params(prior_params.copy(requires_grad=False))
    mode = {"tb": "finetune_tb", "rtb": "finetune_rtb", "task": "tasktrain"}[objective]
    out = Path(args.out or cfg.io.out_dir)
    try:
        trainer = Trainer(policy, mdp, tcfg.train_config(), cfg.context(), mode,
                          _reward_fn(cfg, tables, external), dataset, prior=prior,
                          prior_mdp=_make_mdp(cfg, None), out_dir=out,
                          property_fn=_property_fn(cfg, tables))
    except ValueError as e:
        raise DataError(str(e)) from None
    if args.checkpoint:
        _resume(trainer, args.checkpoint, args.force)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    trainer.train()
    trainer.save()
    log.info("%s finished at step %d; checkpoint in %s", mode, trainer.step, out)
    return EXIT_OK


def _sample_chunk(job) -> list[str]:
    """Worker body: sample ``n`` molecules and format output lines."""
    cfg, params_path, force, scaffold_smiles, n, seed, batch_size = job
    policy = _policy(cfg)
    params, _ = _load_params(policy, params_path, force)
    mdp = _make_mdp(cfg, _scaffold(scaffold_smiles, cfg))
    ctx = cfg.context()
    tables = _tables(cfg)
    external = _read_table(cfg.data.external_reward, "external") \
        if cfg.data.external_reward else None
    reward = _reward_fn(cfg, tables, external)
    props = _property_fn(cfg, tables)
    rng = np.random.default_rng(seed)
    enc = ctx.encode()
    lines = []
    while len(lines) < n:
        m = min(batch_size, n - len(lines))
        trajs = sample_trajectories(policy, params, mdp, np.tile(enc, (m, 1)), rng,
                                    temperature=cfg.sample.temperature)
        for tr in trajs:
            x = tr.final
            vals = props(x, ctx)
            cols = [write(x), f"{reward(x, ctx):.10g}"] + [f"{vals[c.prop]:.10g}"
                                                           for c in ctx.conditionals]
            lines.append("\t".join(cols))
    return lines


def cmd_sample(args) -> int:
    cfg = _load_config(args.config)
    if not args.checkpoint:
        raise ConfigError("sample needs --checkpoint")
    n = cfg.sample.n if args.n is None else args.n
    if n < 0:
        raise ConfigError("--n must be non-negative")
    out = Path(args.out or Path(cfg.io.out_dir) / "samples.tsv")
    _load_params(_policy(cfg), args.checkpoint, args.force)  # fail early on bad files
    scaffold = args.seed_scaffold or cfg.training.seed_scaffold
    _make_mdp(cfg, _scaffold(scaffold, cfg))
    workers = max(1, args.workers)
    seeds = np.random.SeedSequence(cfg.io.seed).spawn(workers)
    batch = cfg.sample.batch_size

    def draw(count: int, round_: int) -> list[str]:
        if count == 0:
            return []
        sizes = [count // workers + (i < count % workers) for i in range(workers)]
        jobs = [(cfg, args.checkpoint, args.force, scaffold, s,
                 np.random.SeedSequence([cfg.io.seed, round_, i]) if round_ else seeds[i],
                 batch) for i, s in enumerate(sizes) if s]
        if len(jobs) == 1:
            return _sample_chunk(jobs[0])
        with ProcessPoolExecutor(len(jobs)) as ex:
            return [line for part in ex.map(_sample_chunk, jobs) for line in part]

    if not cfg.sample.unique_filter:
        lines = draw(n, 0)
    else:
        lines, seen, attempts, round_ = [], set(), 0, 0
        while len(lines) < n:
            if attempts >= cfg.sample.max_attempts:
                raise DataError(f"unique filter: only {len(lines)} of {n} unique molecules "
                                f"after {attempts} attempts")
            want = min(n - len(lines), cfg.sample.max_attempts - attempts)
            for line in draw(want, round_):
                key = canonical_key(parse(line.split("\t", 1)[0]))
                if key not in seen and len(lines) < n:
                    seen.add(key)
                    lines.append(line)
            attempts += want
            round_ += 1
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(line + "\n" for line in lines))
    log.info("wrote %d samples to %s", len(lines), out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    strict = args.strict or cfg.data.strict
    ctx = cfg.context()
    tables = _tables(cfg)
    mols, rewards, invalid = [], [], 0
    try:
        lines = Path(args.samples).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read samples: {e}") from None
    reward = _reward_fn(cfg, tables, None)
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        try:
            g = parse(cols[0].strip())
            g.validate()
            r = float(cols[1]) if len(cols) > 1 else reward(g, ctx)
        except (SmilesError, ValenceError, ValueError) as e:
            if strict:
                raise DataError(f"{args.samples}:{lineno}: {e}") from None
            invalid += 1
            continue
        mols.append(g)
        rewards.append(r)
    e = cfg.evaluate
    s = SampleSet(mols, rewards, invalid, e.fingerprint_radius, e.fingerprint_width)
    ref_keys = None
    if cfg.data.novelty_reference:
        try:
            ref_keys = {canonical_key(m) for m in load_iter(cfg.data.novelty_reference)}
        except (OSError, SmilesError) as err:
            raise DataError(f"novelty reference: {err}") from None
    scores = ref_fps = None
    if cfg.data.docking_scores and cfg.data.actives_median is not None:
        scores = _read_table(cfg.data.docking_scores, "docking")
        ref_fps = []
        if cfg.data.novelty_reference:
            ref_fps = [fingerprint(m, e.fingerprint_radius, e.fingerprint_width)
                       for m in load_iter(cfg.data.novelty_reference)]
    try:
        report = evaluate(s, ctx, ref_keys, scores=scores, actives_median=cfg.data.actives_median,
                          reference_fps=ref_fps or (), tables=tables,
                          circle_threshold=e.circle_threshold, workers=max(1, args.workers),
                          ring_sizes=cfg.training.ring_sizes or None)
    except ValueError as err:
        raise DataError(str(err)) from None
    out = Path(args.out or Path(args.samples).with_suffix(".report.txt"))
    out.write_text(report.as_text())
    out.with_suffix(".tsv").write_text(report.as_table())
    sys.stdout.write(report.as_text())
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atomgfn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint_help):
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--checkpoint", help=checkpoint_help)
        sp.add_argument("--out", help="output directory or file")
        sp.add_argument("--workers", type=int, default=1, help="parallel sampling workers")
        sp.add_argument("--strict", action="store_true", help="fail on malformed input lines")
        sp.add_argument("--force", action="store_true", help="ignore checkpoint config hash")

    sp = sub.add_parser("pretrain", help="train a prior with TB + MLE on hybrid batches")
    common(sp, "resume from this checkpoint")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="finetune a prior with TB or RTB")
    common(sp, "resume from this checkpoint")
    sp.add_argument("--prior", help="prior checkpoint")
    sp.add_argument("--objective", choices=("tb", "rtb", "task"))
    sp.add_argument("--seed-scaffold", help="SMILES installed as the frozen initial state")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("sample", help="sample molecules from a checkpoint")
    common(sp, "checkpoint to sample from")
    sp.add_argument("--n", type=int, help="number of molecules")
    sp.add_argument("--seed-scaffold", help="SMILES installed as the frozen initial state")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("evaluate", help="compute the metric report of a sample file")
    common(sp, "unused")
    sp.add_argument("samples", help="file of smiles<TAB>reward<TAB>... lines")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
