#!/usr/bin/python
# vim: set fileencoding=utf-8 :

"""Command line for training runs, evaluation, seed sweeps, curve tables and group comparison.

   Runs land under $DACLAB_OUTPUT_ROOT (default ./runs). A run directory holds
   resolved_config.ini and one seed_<n>/ subdirectory per seed with metrics.jsonl and
   checkpoint.npz.
"""

import argparse
import concurrent.futures
import dataclasses
import logging
import os
import pdb
import signal
import sys

import numpy as np
import pandas as pd
import tqdm
import yaml

import algos
import diffcore as dc
import envs
import policy as pol
import trainer


pd.set_option("display.max_rows", 500)
pd.set_option("display.max_columns", 40)
pd.set_option("display.width", 160)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = 'DACLAB_OUTPUT_ROOT'
STD_NOTE = '# std is the population standard deviation (divide by N) across seeds'


class AlignmentError(Exception):
    pass


def start_pdb(sig, frame):
    """Start PDB on a signal."""
    pdb.Pdb().set_trace(frame)


def output_root():
    return os.environ.get(OUTPUT_ROOT_ENV, 'runs')


def load_config(path, overrides=()):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise algos.ConfigError(f"cannot read config {path}: {e}")
    return trainer.TrainConfig.from_text(text, overrides)


def write_resolved(config, output_dir):
    os.makedirs(output_dir, exist_ok=True)
    with open(os.path.join(output_dir, 'resolved_config.ini'), 'w') as f:
        f.write(config.to_text())


def run_train(config_path, output_dir=None, overrides=(), resume=False):
    """Validate the config, then train every seed into output_dir/seed_<n>."""
    config = load_config(config_path, overrides)
    if output_dir is None:
        name = os.path.splitext(os.path.basename(config_path))[0]
        output_dir = os.path.join(output_root(), name)
    write_resolved(config, output_dir)
    for seed in config.seeds:
        log.info("training %s seed %d", config.algorithm, seed)
        trainer.Trainer(config, seed, os.path.join(output_dir, f"seed_{seed}")).train(resume)
    return output_dir


def run_eval(checkpoint, env, episodes=50, dump=None):
    """Greedy evaluation of a checkpoint; env is an environment kind."""
    policy, arrays = pol.load_checkpoint(checkpoint)
    spec = None
    if 'config_text' in arrays:
        spec = trainer.TrainConfig.from_text(str(arrays['config_text'])).env
    if spec is None or spec.kind != env:
        spec = envs.EnvSpec(kind=env)
    if dump and os.path.exists(dump):
        os.remove(dump)
    return trainer.evaluate(policy, spec, episodes, dump_path=dump)


@dataclasses.dataclass
class ExperimentManifest:
    """Sweep cells: every (label, seed) pair is one training run."""
    output_dir: str
    runs: list
    base_config: str = None

    @classmethod
    def from_yaml(cls, path):
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
        here = os.path.dirname(os.path.abspath(path))
        base = doc.get('base_config')
        if base is not None and not os.path.isabs(base):
            base = os.path.join(here, base)
        output_dir = doc.get('output_dir') or os.path.splitext(os.path.basename(path))[0]
        if not os.path.isabs(output_dir):
            output_dir = os.path.join(output_root(), output_dir)
        manifest = cls(output_dir=output_dir, runs=list(doc.get('runs') or []), base_config=base)
        manifest.validate()
        return manifest

    def base_text(self):
        if self.base_config is None:
            return ''
        with open(self.base_config) as f:
            return f.read()

    def validate(self):
        labels = [run.get('label') for run in self.runs]
        if not labels or None in labels:
            raise algos.ConfigError("every manifest run needs a label")
        duplicates = sorted({l for l in labels if labels.count(l) > 1})
        if duplicates:
            raise algos.ConfigError(f"duplicate manifest labels: {duplicates}")
        self.cells()

    def overrides(self, run):
        items = []
        if 'algorithm' in run:
            items.append(f"train.algorithm={run['algorithm']}")
        if 'env' in run:
            items.append(f"env.kind={run['env']}")
        items.extend(run.get('overrides') or [])
        return items

    def cells(self):
        """(label, seed, TrainConfig) for every cell; raises ConfigError on a bad override."""
        text = self.base_text()
        out = []
        for run in self.runs:
            seeds = run.get('seeds')
            if not seeds:
                seeds = trainer.TrainConfig.from_text(text, self.overrides(run)).seeds
            for seed in seeds:
                cell = trainer.TrainConfig.from_text(
                    text, self.overrides(run) + [f"train.seeds={seed}"])
                out.append((run['label'], int(seed), cell))
        return out


def run_cell(config_text, seed, run_dir):
    """One sweep cell; returns an error message or None."""
    try:
        with np.errstate(all='raise', under='ignore'):
            config = trainer.TrainConfig.from_text(config_text)
            trainer.Trainer(config, seed, run_dir).train()
    except Exception as e:
        return f"{type(e).__name__}: {e}"
    return None


def run_sweep(manifest, workers=1):
    """Train every cell, then write summary.csv (final and peak SR mean/std per label)."""
    cells = manifest.cells()
    jobs = []
    for label, seed, config in cells:
        run_dir = os.path.join(manifest.output_dir, label, f"seed_{seed}")
        write_resolved(config, run_dir)
        jobs.append((label, seed, config.to_text(), run_dir))
    failures = {}
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_cell, text, seed, d): (label, seed)
                       for label, seed, text, d in jobs}
            for fut in tqdm.tqdm(concurrent.futures.as_completed(futures), total=len(futures),
                                 desc='cells'):
                error = fut.result()
                if error:
                    failures[futures[fut]] = error
    else:
        for label, seed, text, d in tqdm.tqdm(jobs, desc='cells'):
            error = run_cell(text, seed, d)
            if error:
                failures[(label, seed)] = error
    for (label, seed), error in sorted(failures.items()):
        log.error("cell %s seed %d failed: %s", label, seed, error)
    finals = {label: config.final_window for label, _, config in cells}
    rows = []
    for run in manifest.runs:
        label = run['label']
        done = [d for l, s, _, d in jobs if l == label and (l, s) not in failures]
        row = {'label': label, 'seeds': len(done),
               'failed': sum(1 for (l, _) in failures if l == label)}
        if done:
            try:
                summary = CurveSummary.from_runs(done, final_window=finals[label])
            except AlignmentError as e:
                log.error("cell %s not summarized: %s", label, e)
                row['error'] = str(e)
            else:
                row.update(final_sr_mean=summary.final_mean, final_sr_std=summary.final_std,
                           peak_sr_mean=summary.peak_mean, peak_sr_std=summary.peak_std)
        rows.append(row)
    df = pd.DataFrame(rows).set_index('label')
    df.to_csv(os.path.join(manifest.output_dir, 'summary.csv'), float_format='%.3f')
    return df, failures


def read_curve(run_dir):
    """Eval points of one run: Series of success rate indexed by env_steps."""
    path = os.path.join(run_dir, 'metrics.jsonl')
    df = pd.read_json(path, lines=True)
    df = df[df['eval_success_rate'].notna()]
    return pd.Series(df['eval_success_rate'].to_numpy(dtype=np.float64),
                     index=df['env_steps'].to_numpy(dtype=np.int64), name=run_dir)


def run_dirs(group_dir):
    """Seed runs under a group directory, or the directory itself when it is a single run."""
    if os.path.exists(os.path.join(group_dir, 'metrics.jsonl')):
        return [group_dir]
    dirs = sorted(os.path.join(group_dir, d) for d in os.listdir(group_dir)
                  if d.startswith('seed_') and
                  os.path.exists(os.path.join(group_dir, d, 'metrics.jsonl')))
    if not dirs:
        raise AlignmentError(f"no metrics.jsonl under {group_dir}")
    return dirs


def _aligned(curves):
    grid = curves[0].index
    for c in curves[1:]:
        if not np.array_equal(c.index, grid):
            raise AlignmentError(f"eval grid of {c.name} differs from {curves[0].name}")
    return pd.DataFrame({c.name: c.to_numpy() for c in curves}, index=grid)


@dataclasses.dataclass
class CurveSummary:
    env_steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    final_mean: float
    final_std: float
    peak_mean: float
    peak_std: float
    n_seeds: int

    @classmethod
    def from_runs(cls, dirs, window=1, final_window=1):
        table = _aligned([read_curve(d) for d in dirs])
        smoothed = table.rolling(window, min_periods=1).mean()
        finals = table.tail(final_window).mean(axis=0)
        peaks = table.max(axis=0)
        return cls(env_steps=table.index.to_numpy(),
                   mean=smoothed.mean(axis=1).to_numpy(),
                   std=smoothed.std(axis=1, ddof=0).to_numpy(),
                   final_mean=float(finals.mean()), final_std=float(finals.std(ddof=0)),
                   peak_mean=float(peaks.mean()), peak_std=float(peaks.std(ddof=0)),
                   n_seeds=len(dirs))

    def frame(self):
        return pd.DataFrame({'env_steps': self.env_steps, 'mean_SR': self.mean,
                             'std_SR': self.std})


def emit_plot_data(groups, window=1, output_dir='.'):
    """One CSV per labelled group with columns env_steps, mean_SR, std_SR."""
    os.makedirs(output_dir, exist_ok=True)
    paths = []
    for label, dirs in groups.items():
        summary = CurveSummary.from_runs(dirs, window=window)
        path = os.path.join(output_dir, f"{label}.csv")
        with open(path, 'w') as f:
            f.write(f"{STD_NOTE}; seeds={summary.n_seeds}; window={window}\n")
            summary.frame().to_csv(f, index=False, float_format='%.6f')
        paths.append(path)
    return paths


@dataclasses.dataclass
class Verdict:
    final_mean_a: float
    final_mean_b: float
    difference: float
    pooled_std: float
    a_holds_last_quartile: bool
    last_quartile_points: int


def compare(dirs_a, dirs_b, final_window=1):
    """Final-SR difference (A - B), pooled std and whether A >= B over the last quartile."""
    a = CurveSummary.from_runs(dirs_a, final_window=final_window)
    b = CurveSummary.from_runs(dirs_b, final_window=final_window)
    if not np.array_equal(a.env_steps, b.env_steps):
        raise AlignmentError(f"eval grids differ between {dirs_a[0]} and {dirs_b[0]}")
    late = a.env_steps >= 0.75 * a.env_steps[-1]
    return Verdict(final_mean_a=a.final_mean, final_mean_b=b.final_mean,
                   difference=a.final_mean - b.final_mean,
                   pooled_std=float(np.sqrt((a.final_std ** 2 + b.final_std ** 2) / 2.0)),
                   a_holds_last_quartile=bool(np.all(a.mean[late] >= b.mean[late])),
                   last_quartile_points=int(late.sum()))


def build_parser():
    parser = argparse.ArgumentParser(description='Decoupled actor-critic desk lab')
    parser.add_argument('--verbose', default=False, required=False, action='store_true',
                        help='log every update')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='train every seed of a config')
    p.add_argument('config')
    p.add_argument('--set', dest='overrides', action='append', default=[],
                   help='override, section.key=value')
    p.add_argument('--output', default=None, help='run directory')
    p.add_argument('--resume', default=False, action='store_true',
                   help='continue from the last checkpoint')

    p = sub.add_parser('eval', help='greedy evaluation of a checkpoint')
    p.add_argument('checkpoint')
    p.add_argument('env', choices=envs.KINDS)
    p.add_argument('--episodes', type=int, default=50)
    p.add_argument('--dump', default=None, help='write a JSONL trajectory here')

    p = sub.add_parser('sweep', help='run every cell of a YAML manifest')
    p.add_argument('manifest')
    p.add_argument('--workers', type=int, default=1)

    p = sub.add_parser('plot-data', help='mean/std SR curves per group directory')
    p.add_argument('dirs', nargs='+')
    p.add_argument('--window', type=int, default=1)
    p.add_argument('--output', default='.')

    p = sub.add_parser('compare', help='compare two group directories')
    p.add_argument('group_a')
    p.add_argument('group_b')

    sub.add_parser('gradcheck', help='finite-difference check of every loss')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    try:
        with np.errstate(all='raise', under='ignore'):
            return _dispatch(args)
    except (algos.ConfigError, envs.SpecError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (dc.DiffError, pol.PolicyError, envs.EnvError, AlignmentError, OSError,
            FloatingPointError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


def _dispatch(args):
    if args.command == 'train':
        out = run_train(args.config, args.output, args.overrides, args.resume)
        print(f"wrote {out}")
    elif args.command == 'eval':
        result = run_eval(args.checkpoint, args.env, args.episodes, args.dump)
        print(f"success rate {result.success_rate:.3f}  mean return "
              f"{result.mean_return:.3f}  over {result.episodes} episodes")
    elif args.command == 'sweep':
        df, failures = run_sweep(ExperimentManifest.from_yaml(args.manifest), args.workers)
        print(df)
        return 1 if failures else 0
    elif args.command == 'plot-data':
        groups = {os.path.basename(os.path.normpath(d)): run_dirs(d) for d in args.dirs}
        for path in emit_plot_data(groups, args.window, args.output):
            print(path)
    elif args.command == 'compare':
        verdict = compare(run_dirs(args.group_a), run_dirs(args.group_b))
        print(pd.Series(dataclasses.asdict(verdict)).to_string())
    elif args.command == 'gradcheck':
        df = trainer.run_gradcheck()
        print(df.to_string(index=False))
        return 0 if df['passed'].all() else 1
    return 0


if __name__ == '__main__':
    signal.signal(signal.SIGUSR1, start_pdb)
    sys.exit(main())
