"""Command-line front end: pretrain, rl, sample, probe, eval.

Exit codes: 0 success, 2 config/input error, 3 checkpoint mismatch,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import PROBE_CSV_COLUMNS, trajectory_probe
from .config import RunConfig, load_config, parse_config
from .core import TimeGrid
from .denoiser import init_params, load_checkpoint, save_checkpoint
from .errors import CheckpointMismatch, ConfigError, DomainError, NumericError, StatisticsError
from .grpo import RL_CSV_COLUMNS, evaluate_reward, train_rl
from .pretrain import PRETRAIN_CSV_COLUMNS, evaluate_ce, run_pretrain
from .rng import stream
from .rollout import CfgSpec, sample_rollouts
from .tasks import reward

log = logging.getLogger("udmlab")

EXIT_OK, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 2, 3, 4


class CsvLog:
    """Header-first CSV writer; floats are written with ``repr`` so re-runs are byte-identical."""

    def __init__(self, path: Path, columns):
        self.columns = tuple(columns)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)

    def __call__(self, row: dict):
        self._w.writerow([row[c] for c in self.columns])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _load(path, cfg: RunConfig):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path, expect=cfg.arch())


def cmd_pretrain(cfg: RunConfig, out: Path, workers: int = 1) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    task = cfg.task()
    (out / "task.txt").write_text(task.to_text())
    params = init_params(cfg.arch(), stream(cfg.seed, "init"), cfg.init_scale)
    with CsvLog(out / "pretrain_metrics.csv", PRETRAIN_CSV_COLUMNS) as csv_log:
        params, losses = run_pretrain(params, task, cfg.schedule_obj(), cfg.pretrain_steps,
                                      stream(cfg.seed, "pretrain"), cfg.pretrain_batch, cfg.cond_drop_p,
                                      cfg.pretrain_optim(), on_step=csv_log, wallclock=cfg.wallclock)
    ckpt = out / "pretrain.udmg"
    save_checkpoint(ckpt, params)
    if losses:
        log.info("pretrain done: final batch loss %.4f", losses[-1])
    return ckpt


def cmd_rl(cfg: RunConfig, checkpoint, out: Path, workers: int = 1) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    params = _load(checkpoint, cfg)
    with CsvLog(out / "rl_metrics.csv", RL_CSV_COLUMNS) as csv_log:
        params, _ = train_rl(params, cfg.task(), cfg.train_config(), cfg.schedule_obj(), cfg.seed,
                             cfg.rl_updates, on_update=csv_log, workers=workers, wallclock=cfg.wallclock)
    ckpt = out / "rl.udmg"
    save_checkpoint(ckpt, params)
    return ckpt


def cmd_sample(cfg: RunConfig, checkpoint, prompt: int, n: int, cfg_spec: CfgSpec, stdout=None,
               workers: int = 1) -> list[float]:
    stdout = stdout or sys.stdout
    task = cfg.task()
    if not 0 <= prompt < task.num_prompts:
        raise DomainError(f"unknown prompt id {prompt}; task has {task.num_prompts} prompts")
    if n < 0:
        raise DomainError("n must be >= 0")
    params = _load(checkpoint, cfg)
    stdout.write("index\treward\ttokens\n")
    if n == 0:
        return []
    rngs = [stream(cfg.seed, "sample", prompt, i) for i in range(n)]
    recs = sample_rollouts(params, [prompt] * n, TimeGrid.uniform(cfg.eval_steps), cfg_spec, rngs,
                           cfg.schedule_obj(), workers)
    rewards = reward(cfg.train_config().reward, task, np.stack([r.clean for r in recs]), prompt)
    rewards = np.atleast_1d(rewards)
    for i, (rec, rw) in enumerate(zip(recs, rewards)):
        stdout.write(f"{i}\t{float(rw)!r}\t{' '.join(map(str, rec.clean))}\n")
    stdout.write(f"# mean_reward\t{float(np.mean(rewards))!r}\n")
    return [float(r) for r in rewards]


def cmd_probe(cfg: RunConfig, checkpoint, out: Path, workers: int = 1) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    params = _load(checkpoint, cfg)
    result = trajectory_probe(params, cfg.task(), TimeGrid.uniform(cfg.sample_steps), cfg.schedule_obj(),
                              cfg.probe_pairs, stream(cfg.seed, "probe"), cfg.cfg(),
                              cfg.probe_feature_dim, cfg.probe_feature_seed)
    if result.warning:
        log.warning(result.warning)
    path = out / "probe.csv"
    with CsvLog(path, PROBE_CSV_COLUMNS) as csv_log:
        for row in result.rows:
            csv_log(row)
    return path


def cmd_eval(cfg: RunConfig, checkpoint, stdout=None, workers: int = 1) -> dict:
    stdout = stdout or sys.stdout
    params = _load(checkpoint, cfg)
    task, schedule = cfg.task(), cfg.schedule_obj()
    res = {
        "mean_reward": evaluate_reward(params, task, cfg.train_config().reward, TimeGrid.uniform(cfg.eval_steps),
                                       cfg.cfg(), schedule, cfg.eval_rollouts, cfg.seed, workers),
        "heldout_ce": evaluate_ce(params, task, schedule, 4096, stream(cfg.seed, "eval_ce")),
    }
    for k, v in res.items():
        stdout.write(f"{k}={v!r}\n")
    return res


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="key=value config file (defaults if omitted)")
    shared.add_argument("--seed", type=int, help="master seed; overrides the config")
    shared.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    shared.add_argument("--checkpoint", type=Path, help="input checkpoint")
    shared.add_argument("--workers", type=int, default=1, help="threads for rollout sampling")

    parser = argparse.ArgumentParser(prog="udmlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[shared], help="cross-entropy pretraining")
    sub.add_parser("rl", parents=[shared], help="policy-gradient fine-tuning")
    sp = sub.add_parser("sample", parents=[shared], help="print sampled sequences and rewards")
    sp.add_argument("--prompt", type=int, default=0)
    sp.add_argument("-n", type=int, default=8)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--cfg", dest="use_cfg", action="store_true", default=None, help="sample with CFG")
    g.add_argument("--no-cfg", dest="use_cfg", action="store_false", help="sample without CFG")
    sp.add_argument("--guidance", type=float, help="guidance scale (implies --cfg)")
    sub.add_parser("probe", parents=[shared], help="trajectory divergence probe")
    sub.add_parser("eval", parents=[shared], help="mean reward and held-out CE of a checkpoint")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config, seed=args.seed) if args.config else parse_config("", seed=args.seed)
        if cfg.task_file and args.config and not Path(cfg.task_file).is_absolute():
            # task files are resolved relative to the config that names them
            cfg = cfg.replace(task_file=str(args.config.parent / cfg.task_file))
        if args.command == "pretrain":
            print(cmd_pretrain(cfg, args.out, args.workers))
        else:
            if args.checkpoint is None:
                raise ConfigError("--checkpoint is required")
            if args.command == "rl":
                print(cmd_rl(cfg, args.checkpoint, args.out, args.workers))
            elif args.command == "sample":
                spec = cfg.cfg()
                if args.guidance is not None:
                    spec = CfgSpec(True, args.guidance)
                elif args.use_cfg is not None:
                    spec = CfgSpec(args.use_cfg, cfg.guidance_scale)
                cmd_sample(cfg, args.checkpoint, args.prompt, args.n, spec, workers=args.workers)
            elif args.command == "probe":
                print(cmd_probe(cfg, args.checkpoint, args.out, args.workers))
            else:
                cmd_eval(cfg, args.checkpoint, workers=args.workers)
    except CheckpointMismatch as exc:
        log.error("checkpoint mismatch: %s", exc)
        return EXIT_CHECKPOINT
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, DomainError, StatisticsError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
