"""Command line interface: embed, sample, train, loglik.

Every run writes a manifest (config echo, seed, library versions) next to
its outputs so results can be reproduced exactly. Exit codes: 0 success,
2 bad input, 3 numeric abort.
"""

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import evolution as evo
from .csmc import NumericAbort, run_csmc
from .embedding import EmbedConfig, embed
from .ncsmc import run_ncsmc
from .training import (TrainConfig, TrainableParams, rate_matrix_of, train,
                       run_forward)
from .treeio import read_alignment, parse_newick, newick_log_likelihood, write_newick

_CONFIG_KEYS = {"k", "m", "seed", "lambda_bl", "mode", "format", "out_dir",
                "steps", "phase1_steps", "step_size", "decay", "scale",
                "embed_iters", "decoder", "resampling", "wn_sigma", "final_k"}


@dataclass(frozen=True)
class RunConfig:
    k: int = 32
    m: int = 2
    seed: int = 0
    lambda_bl: float = 10.0
    mode: str = "csmc"
    format: str = "fasta"
    out_dir: str = "."
    steps: int = 400
    phase1_steps: int = 200
    step_size: float = 5e-3
    decay: float = 0.999
    scale: float = 4.0
    embed_iters: int = 1000
    decoder: bool = False
    resampling: str = "multinomial"
    wn_sigma: float = 0.2
    final_k: int = 0            # particles for the reported tree; 0 means 4 * k

    def validate(self):
        if self.k < 1 or self.m < 1 or self.steps < 0:
            raise ValueError("k, m must be >= 1 and steps >= 0")
        if self.lambda_bl <= 0:
            raise ValueError("lambda-bl must be positive")
        if self.final_k < 0:
            raise ValueError("final_k must be >= 0")
        if self.mode not in ("csmc", "ncsmc"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.format not in ("fasta", "nexus"):
            raise ValueError(f"unknown format {self.format!r}")


def load_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
        unknown = set(data) - _CONFIG_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = replace(cfg, **data)
    overrides = {}
    for flag, key in [("k", "k"), ("m", "m"), ("seed", "seed"),
                      ("lambda_bl", "lambda_bl"), ("mode", "mode"),
                      ("format", "format"), ("out_dir", "out_dir"),
                      ("steps", "steps")]:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _write_manifest(out_dir, command, cfg, extra=None):
    import scipy
    manifest = {
        "command": command,
        "config": asdict(cfg),
        "versions": {"hypsmc": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__,
                     "python": sys.version.split()[0]},
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_embed(alignment_path, cfg: RunConfig) -> int:
    alignment = read_alignment(alignment_path, cfg.format)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = embed(alignment, EmbedConfig(scale=cfg.scale,
                                          max_iters=cfg.embed_iters,
                                          seed=cfg.seed))
    _write_csv(out / "embeddings.csv", ["taxon", "x", "y"],
               [(t, f"{p[0]:.17g}", f"{p[1]:.17g}")
                for t, p in zip(alignment.taxa, result.points)])
    _write_csv(out / "trace.csv", ["iteration", "loss"],
               [(i, f"{v:.17g}") for i, v in enumerate(result.loss_history)])
    _write_manifest(cfg.out_dir, "embed", cfg,
                    {"final_loss": result.loss_history[-1]})
    return 0


def cmd_sample(alignment_path, cfg: RunConfig) -> int:
    alignment = read_alignment(alignment_path, cfg.format)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emb = embed(alignment, EmbedConfig(scale=cfg.scale,
                                       max_iters=cfg.embed_iters,
                                       seed=cfg.seed))
    rate = evo.jc_rate_matrix(len(alignment.alphabet))
    prior = evo.BranchPrior(cfg.lambda_bl)
    cov = np.eye(2) * cfg.wn_sigma ** 2
    if cfg.mode == "csmc":
        system, log_z = run_csmc(alignment, emb.points, rate, prior,
                                 cfg.k, cfg.seed, wn_cov=cov)
    else:
        system, log_z = run_ncsmc(alignment, emb.points, rate, prior,
                                  cfg.k, cfg.m, cfg.seed, wn_cov=cov)
    best = int(np.argmax(system.log_weights))
    write_newick(system.states[best], out / "tree.nwk", taxa=alignment.taxa)
    _write_csv(out / "ess.csv", ["rank", "ess", "log_mean_weight"],
               [(r + 1, f"{e:.17g}", f"{t:.17g}")
                for r, (e, t) in enumerate(zip(system.ess,
                                               system.log_Z_terms))])
    _write_manifest(cfg.out_dir, "sample", cfg,
                    {"log_Z": log_z, "log_marginal": system.log_marginal})
    print(f"log_Z {log_z:.10g}  log_marginal {system.log_marginal:.10g}")
    return 0


def cmd_train(alignment_path, cfg: RunConfig) -> int:
    alignment = read_alignment(alignment_path, cfg.format)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = TrainConfig(steps=cfg.steps, phase1_steps=min(cfg.phase1_steps, cfg.steps),
                       K=cfg.k, M=cfg.m, mode=cfg.mode,
                       step_size=cfg.step_size, decay=cfg.decay,
                       seed=cfg.seed, lambda_bl=cfg.lambda_bl,
                       embed=EmbedConfig(scale=cfg.scale,
                                         max_iters=cfg.embed_iters,
                                         seed=cfg.seed))
    params, trace = train(alignment, tcfg)
    _write_csv(out / "trace.csv",
               ["step", "phase", "log_Z", "grad_norm", "params_hash",
                "elapsed_s"],
               [(s, p, f"{z:.17g}", f"{g:.17g}", h, f"{t:.6f}")
                for s, p, z, g, h, t in trace.steps])
    with open(out / "params.json", "w", encoding="utf-8") as fh:
        json.dump({"embeddings": params.embeddings.tolist(),
                   "cov_raw": params.cov_raw.tolist(),
                   "stat_logits": params.stat_logits.tolist(),
                   "hold_raw": params.hold_raw.tolist(),
                   "lambda_bl": params.lambda_bl}, fh, indent=2)
        fh.write("\n")
    final_k = cfg.final_k or 4 * cfg.k
    system = run_forward(params, alignment, final_k, cfg.seed + cfg.steps,
                         cfg.mode, M=cfg.m, build_states=True)
    best = int(np.argmax(system.log_weights))
    write_newick(system.states[best], out / "tree.nwk", taxa=alignment.taxa)
    _write_manifest(cfg.out_dir, "train", cfg,
                    {"final_log_Z": trace.steps[-1][2] if trace.steps else None})
    return 0


def cmd_loglik(alignment_path, tree_path, cfg: RunConfig) -> int:
    alignment = read_alignment(alignment_path, cfg.format)
    with open(tree_path, encoding="utf-8") as fh:
        tree = parse_newick(fh.read())
    rate = evo.jc_rate_matrix(len(alignment.alphabet))
    prior = evo.BranchPrior(cfg.lambda_bl)
    loglik, logprior = newick_log_likelihood(tree, alignment, rate, prior)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(cfg.out_dir, "loglik", cfg,
                    {"log_likelihood": loglik, "log_prior": logprior,
                     "log_posterior_unnorm": loglik + logprior})
    print(f"log_likelihood {loglik:.10g}  log_prior {logprior:.10g}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="hypsmc")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--k", type=int)
        p.add_argument("--m", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--lambda-bl", dest="lambda_bl", type=float)
        p.add_argument("--mode", choices=["csmc", "ncsmc"])
        p.add_argument("--format", choices=["fasta", "nexus"])
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--config")

    p = sub.add_parser("embed")
    p.add_argument("alignment")
    common(p)
    p = sub.add_parser("sample")
    p.add_argument("alignment")
    common(p)
    p = sub.add_parser("train")
    p.add_argument("alignment")
    p.add_argument("--steps", type=int)
    common(p)
    p = sub.add_parser("loglik")
    p.add_argument("alignment")
    p.add_argument("tree")
    common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "embed":
            return cmd_embed(args.alignment, cfg)
        if args.command == "sample":
            return cmd_sample(args.alignment, cfg)
        if args.command == "train":
            return cmd_train(args.alignment, cfg)
        if args.command == "loglik":
            return cmd_loglik(args.alignment, args.tree, cfg)
        return 2
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericAbort, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
