"""Benchmark harness: timed runs per execution mode and ratio statistics.

Each mode's wall-clock samples are cleaned of outliers (median +/- 3 scaled
MAD, repeated until stable but never below three points), then summarized by mean and
deviation and expressed as a ratio over the native baseline:

    R  = t_i / t_host
    dR = R * sqrt((dt_i / t_i)**2 + (dt_host / t_host)**2)
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import math
import os
import statistics
import subprocess
import sys
import time

from .errors import DegenerateSampleError, UdockerError, UndefinedRatioError, UsageError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_FIELDS = (
    "schema_version", "mode", "n", "kept", "mean", "std", "std_pop", "sem", "R", "dR", "stops", "status",
)
BASELINE = "native"
DEFAULT_REPETITIONS = 10
MAD_SCALE = 1.4826  # makes the MAD a consistent sigma estimate for normal data
MAD_CUT = 3.0
MIN_SAMPLES = 5
MIN_KEPT = 3


@dataclasses.dataclass
class RunSample:
    tag: str
    samples: list
    mask: list | None = None
    stops: int | None = None
    failed: bool = False

    def __post_init__(self):
        if self.mask is not None and len(self.mask) != len(self.samples):
            raise ValueError("mask length %d != sample count %d" % (len(self.mask), len(self.samples)))

    @property
    def kept(self):
        if self.mask is None:
            return list(self.samples)
        return [s for s, keep in zip(self.samples, self.mask) if keep]

    def masked(self):
        return dataclasses.replace(self, mask=mask_outliers(self.samples))


@dataclasses.dataclass(frozen=True)
class RatioResult:
    t_i: float
    dt_i: float
    t_host: float
    dt_host: float
    R: float
    dR: float


def _band(values):
    med = statistics.median(values)
    mad = statistics.median(abs(v - med) for v in values)
    return med, MAD_CUT * MAD_SCALE * mad


def mask_outliers(samples):
    """True for samples kept, False for outliers."""
    samples = list(samples)
    if len(samples) < MIN_SAMPLES:
        raise DegenerateSampleError("need at least %d samples, got %d" % (MIN_SAMPLES, len(samples)))
    keep = [True] * len(samples)
    while True:
        med, width = _band([s for s, k in zip(samples, keep) if k])
        drop = [i for i, s in enumerate(samples) if keep[i] and abs(s - med) > width]
        # stop at a fixed point, or before a pass would leave too few points
        if not drop or sum(keep) - len(drop) < MIN_KEPT:
            break
        for i in drop:
            keep[i] = False
    if sum(keep) < MIN_KEPT:
        raise DegenerateSampleError("only %d samples left after outlier masking" % sum(keep))
    return keep


def summary(values):
    """Mean, sample and population deviation, and standard error of the mean."""
    n = len(values)
    mean = statistics.fmean(values)
    std = statistics.stdev(values, mean) if n > 1 else 0.0
    std_pop = statistics.pstdev(values, mean)
    return {"n": n, "mean": mean, "std": std, "std_pop": std_pop, "sem": std / math.sqrt(n)}


def ratio_values(t_i, dt_i, t_host, dt_host):
    if t_host == 0:
        raise UndefinedRatioError("baseline mean is zero")
    r = t_i / t_host
    # same as r*sqrt((dt_i/t_i)**2 + (dt_host/t_host)**2), but defined for t_i == 0
    dr = math.hypot(dt_i, r * dt_host) / abs(t_host)
    return RatioResult(t_i, dt_i, t_host, dt_host, r, dr)


def _masked_values(run):
    values = run.kept if run.mask is not None else [s for s, k in zip(run.samples, mask_outliers(run.samples)) if k]
    if len(values) < MIN_KEPT:
        raise DegenerateSampleError("%s: only %d samples kept" % (run.tag, len(values)))
    return values


def ratio(env, base):
    """Ratio of ``env`` over ``base`` from masked means and n-1 deviations."""
    e = summary(_masked_values(env))
    b = summary(_masked_values(base))
    return ratio_values(e["mean"], e["std"], b["mean"], b["std"])


# -- CSV and chart -----------------------------------------------------------

def table(runs, baseline=BASELINE):
    """One CSV row per run; failed runs are kept but flagged."""
    by_tag = {r.tag: r for r in runs}
    if baseline not in by_tag or by_tag[baseline].failed:
        raise UsageError("baseline %r missing or failed" % baseline)
    base = by_tag[baseline]
    rows = []
    for run in runs:
        row = {"schema_version": SCHEMA_VERSION, "mode": run.tag, "n": len(run.samples),
               "stops": "" if run.stops is None else run.stops}
        if run.failed:
            row.update(kept=0, mean="", std="", std_pop="", sem="", R="", dR="", status="failed")
            rows.append(row)
            continue
        values = _masked_values(run)
        s = summary(values)
        res = ratio(run, base)
        row.update(kept=len(values), mean=s["mean"], std=s["std"], std_pop=s["std_pop"], sem=s["sem"],
                   R=res.R, dR=res.dR, status="ok")
        rows.append(row)
    return rows


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def chart(rows, path, title=None):
    """Bar chart of R with dR error bars; returns {mode: bar height}."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r["status"] == "ok"]
    fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(ok) + 1), 4))
    try:
        bars = ax.bar([r["mode"] for r in ok], [float(r["R"]) for r in ok],
                      yerr=[float(r["dR"]) for r in ok], capsize=4, color="tab:blue")
        ax.axhline(1.0, color="grey", linewidth=0.8, linestyle="--")
        ax.set_ylabel("time / native")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        return {r["mode"]: b.get_height() for r, b in zip(ok, bars.patches)}
    finally:
        plt.close(fig)


# -- running ----------------------------------------------------------------

@dataclasses.dataclass
class Workload:
    """Declarative benchmark description, usually loaded from JSON."""

    command: list
    container: str
    modes: list = dataclasses.field(default_factory=lambda: [BASELINE, "P1", "P2"])
    repetitions: int = DEFAULT_REPETITIONS
    repo: str | None = None
    native_command: list | None = None
    title: str | None = None

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise UsageError("unknown workload keys: %s" % ", ".join(sorted(unknown)))
        try:
            return cls(**doc)
        except TypeError as exc:
            raise UsageError("invalid workload manifest: %s" % exc) from exc


@contextlib.contextmanager
def _quiet():
    """Send fds 1 and 2 to /dev/null for the duration of a timed run."""
    sys.stdout.flush()
    sys.stderr.flush()
    saved = [os.dup(1), os.dup(2)]
    null = os.open(os.devnull, os.O_WRONLY)
    try:
        os.dup2(null, 1)
        os.dup2(null, 2)
        yield
    finally:
        os.dup2(saved[0], 1)
        os.dup2(saved[1], 2)
        for fd in (*saved, null):
            os.close(fd)


def _native_argv(work, rootfs):
    if work.native_command:
        return list(work.native_command)
    argv = list(work.command)
    # run the container's own binary straight from the host
    if argv and argv[0].startswith("/"):
        argv[0] = os.path.join(rootfs, argv[0].lstrip("/"))
    return argv


def time_native(argv, repetitions, cwd=None):
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        code = subprocess.run(argv, cwd=cwd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL, check=False).returncode
        samples.append(time.perf_counter() - t0)
        if code != 0:
            return RunSample(BASELINE, samples, failed=True)
    return RunSample(BASELINE, samples)


def time_mode(repo, container, mode, argv, repetitions):
    from . import execution
    from .metadata import RunOptions, build_exec_spec

    execution.setup(repo, container, mode)
    rec = repo.get_container(container)
    cfg = execution.image_config(repo, container)
    samples, stops = [], []
    for _ in range(repetitions):
        spec = build_exec_spec(cfg, RunOptions(argv=list(argv)), host_env={}, rootfs=rec.rootfs)
        with _quiet():
            t0 = time.perf_counter()
            try:
                code, stats = execution.run(repo, container, spec)
            except UdockerError as exc:
                log.error("%s: %s", mode, exc)
                code, stats = -1, None
            samples.append(time.perf_counter() - t0)
        if code != 0:
            log.error("%s: run exited with %d", mode, code)
            return RunSample(mode, samples, failed=True)
        if stats and "stops" in stats:
            stops.append(stats["stops"])
    return RunSample(mode, samples, stops=round(statistics.fmean(stops)) if stops else None)


def run_matrix(work, modes=None, repetitions=None, csv_path=None, chart_path=None):
    """Time ``work`` in every mode; returns the CSV rows."""
    from .repo_store import LocalRepository, default_root

    modes = list(modes or work.modes)
    reps = repetitions or work.repetitions
    if BASELINE not in modes:
        modes.insert(0, BASELINE)
    repo = LocalRepository(work.repo or default_root())
    rec = repo.get_container(work.container)
    initial_mode = rec.exec_mode
    runs = []
    try:
        for mode in modes:
            log.info("timing %s x%d", mode, reps)
            if mode == BASELINE:
                runs.append(time_native(_native_argv(work, rec.rootfs), reps, cwd=rec.rootfs))
            else:
                runs.append(time_mode(repo, work.container, mode, work.command, reps))
    finally:
        from . import execution

        execution.setup(repo, work.container, initial_mode)
    rows = table(runs)
    if csv_path:
        write_csv(rows, csv_path)
    if chart_path:
        chart(rows, chart_path, work.title)
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(prog="udocker-bench", description="time a workload across execution modes")
    p.add_argument("manifest", help="JSON workload manifest")
    p.add_argument("--modes", default=None, help="comma separated modes (default from manifest)")
    p.add_argument("-n", "--repetitions", type=int, default=None)
    p.add_argument("--csv", default="bench.csv")
    p.add_argument("--chart", default="bench.png")
    p.add_argument("-D", "--debug", action="store_true")
    ns = p.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.debug else logging.INFO, format="%(levelname)s: %(message)s")
    try:
        work = Workload.load(ns.manifest)
        modes = ns.modes.split(",") if ns.modes else None
        rows = run_matrix(work, modes, ns.repetitions, ns.csv, ns.chart)
    except UdockerError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return exc.exit_code
    writer = csv.DictWriter(sys.stdout, fieldnames=CSV_FIELDS)
    writer.writeheader()
    writer.writerows(rows)
    return 0 if all(r["status"] == "ok" for r in rows) else 4


if __name__ == "__main__":
    sys.exit(main())
