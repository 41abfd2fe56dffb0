"""Execution modes of a container: selection, setup transitions and runs."""

import json
import logging

from . import engine_loader, engine_ns, tools
from .engine_ptrace import PtraceEngine
from .errors import UsageError
from .metadata import parse_config

log = logging.getLogger(__name__)

MODES = ("P1", "P2", "F1", "F2", "F3", "F4", "R1")
MODE_HELP = {
    "P1": "ptrace with seccomp filtering (default)",
    "P2": "ptrace of every system call",
    "F1": "explicit loader invocation and LD_LIBRARY_PATH",
    "F2": "modified loader copy that ignores host libraries",
    "F3": "binaries patched to use the container loader",
    "F4": "like F3 with executables patched on first use",
    "R1": "unprivileged user and mount namespaces",
}
# modes that leave journaled modifications in the container
PATCHING_MODES = ("F2", "F3", "F4")


def check_mode(mode):
    if mode not in MODES:
        raise UsageError("unknown execution mode %r (choose from %s)" % (mode, ", ".join(MODES)))
    return mode


def setup(repo, name_or_id, mode):
    """Switch a container to ``mode``; earlier patches are reverted first."""
    check_mode(mode)
    rec = repo.get_container(name_or_id)
    cdir = repo.container_dir(rec.id)
    restored = engine_loader.revert(cdir)
    if restored:
        log.info("reverted %d patched files", len(restored))
    if mode in PATCHING_MODES:
        interposer = tools.ensure_installed(repo.root)
        engine_loader.prepare(rec.rootfs, mode, None, cdir, interposer)
    repo.set_exec_mode(rec.id, mode)
    return rec.id


def image_config(repo, name_or_id):
    return parse_config(json.dumps(repo.container_image_config(name_or_id)).encode())


def make_engine(repo, rec, mode, **options):
    cdir = repo.container_dir(rec.id)
    if mode in ("P1", "P2"):
        return PtraceEngine(mode, **options)
    if mode.startswith("F"):
        interposer = tools.ensure_installed(repo.root)
        return engine_loader.LoaderEngine(mode, interposer=interposer, container_dir=cdir)
    if mode == "R1":
        engine_ns.check_available()
        return engine_ns.NamespaceEngine(delegate=options.get("delegate", False), container_dir=cdir)
    raise UsageError("unknown execution mode %r" % mode)


def run(repo, name_or_id, spec, **options):
    """Run ``spec`` in a container with its persisted execution mode."""
    rec = repo.get_container(name_or_id)
    mode = check_mode(rec.exec_mode)
    spec.mode = mode
    engine = make_engine(repo, rec, mode, **options)
    log.debug("running %s in %s with mode %s", spec.argv, rec.id, mode)
    code = engine.run(spec, rec.rootfs)
    stats = getattr(engine, "stats", None)
    return code, stats
