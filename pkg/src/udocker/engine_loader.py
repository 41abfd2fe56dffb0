"""Execution through the container's own dynamic loader (modes F1 to F4).

F1  the container loader is invoked explicitly with the program as its
    argument and LD_LIBRARY_PATH pointing at container directories.
F2  like F1, but with a copy of the loader that no longer consults the
    host cache or the host default library directories.
F3  every dynamic binary in the rootfs gets its interpreter and runpath
    rewritten ahead of time (journaled, reversible).
F4  only the loader is patched up front; executables are patched the first
    time they are executed.

In all modes the interposer (``<repo>/lib/libudocker-fk.so``) is preloaded
to translate the path arguments of C library calls.
"""

import dataclasses
import logging
import os
import struct
import subprocess
import sys

from .elf_patcher import (
    DEFAULT_LIB_DIRS,
    PatchJournal,
    is_elf,
    loader_edits,
    patch_on_demand,
    plan_and_apply,
    read_elf,
    read_interpreter,
)
from .engine_ptrace import MAX_SHEBANG_DEPTH, find_executable
from .errors import FormatError, ModeUnavailableError, NotFoundError
from .pathmap import PathMap

log = logging.getLogger(__name__)

MODES = ("F1", "F2", "F3", "F4")
F2_LOADER = "ld-udocker.so"

ENV_ROOT = "UDOCKER_FK_ROOT"
ENV_BINDS = "UDOCKER_FK_BINDS"
ENV_MODE = "UDOCKER_FK_MODE"
ENV_LOADER = "UDOCKER_FK_LOADER"
ENV_LIBPATH = "UDOCKER_FK_LIBPATH"
ENV_ULDPATH = "UDOCKER_FK_ULDPATH"
ENV_UPRELOAD = "UDOCKER_FK_UPRELOAD"
ENV_SELF = "UDOCKER_FK_SELF"
ENV_PATCHER = "UDOCKER_FK_PATCHER"
ENV_PYPATH = "UDOCKER_FK_PYPATH"
ENV_CDIR = "UDOCKER_FK_CDIR"

LOADER_CANDIDATES = (
    "/lib64/ld-linux-x86-64.so.2",
    "/lib/ld-linux-x86-64.so.2",
    "/lib/x86_64-linux-gnu/ld-linux-x86-64.so.2",
    "/lib/ld-linux-aarch64.so.1",
    "/lib/ld-linux.so.2",
    "/lib/ld-musl-x86_64.so.1",
)
PROBE_PROGRAMS = ("/bin/sh", "/usr/bin/env", "/bin/ls", "/bin/bash", "/usr/bin/python3")

# -- ld.so.cache -------------------------------------------------------------

CACHE_MAGIC_OLD = b"ld.so-1.7.0"
CACHE_MAGIC_NEW = b"glibc-ld.so.cache"
CACHE_VERSION_NEW = b"1.1"
_OLD_HDR = struct.Struct("<12sI")  # magic padded to 12, nlibs
_OLD_ENTRY = struct.Struct("<iII")  # flags, key, value
_NEW_HDR = struct.Struct("<17s3sIIB3xI12x")  # magic, version, nlibs, len_strings, flags, ext offset
_NEW_ENTRY = struct.Struct("<iIIIQ")  # flags, key, value, osversion, hwcap


@dataclasses.dataclass
class LdSoCacheView:
    entries: list  # (soname, container path)
    format: str = "new"

    def rebased(self, pathmap):
        """Entries with their paths re-prefixed into the rootfs."""
        return [(name, pathmap.lexical_host(path)) for name, path in self.entries]

    def directories(self):
        out = []
        for _, path in self.entries:
            d = os.path.dirname(path)
            if d not in out:
                out.append(d)
        return out


def _cstring(data, offset):
    end = data.find(b"\0", offset)
    if offset >= len(data) or end < 0:
        raise FormatError("ld.so.cache string offset 0x%x out of range" % offset)
    return data[offset:end].decode("utf-8", "surrogateescape")


def _parse_new(data, base):
    try:
        magic, version, nlibs, _, _, _ = _NEW_HDR.unpack_from(data, base)
    except struct.error as exc:
        raise FormatError("truncated ld.so.cache header") from exc
    if version != CACHE_VERSION_NEW:
        raise FormatError("unsupported ld.so.cache version %r" % version)
    start = base + _NEW_HDR.size
    if start + nlibs * _NEW_ENTRY.size > len(data):
        raise FormatError("truncated ld.so.cache entry table")
    entries = []
    for i in range(nlibs):
        _, key, value, _, _ = _NEW_ENTRY.unpack_from(data, start + i * _NEW_ENTRY.size)
        entries.append((_cstring(data, base + key), _cstring(data, base + value)))
    return LdSoCacheView(entries, "new")


def parse_ld_so_cache_bytes(data):
    if data.startswith(CACHE_MAGIC_NEW):
        return _parse_new(data, 0)
    if data.startswith(CACHE_MAGIC_OLD):
        try:
            _, nlibs = _OLD_HDR.unpack_from(data, 0)
        except struct.error as exc:
            raise FormatError("truncated ld.so.cache header") from exc
        table = _OLD_HDR.size + nlibs * _OLD_ENTRY.size
        if table > len(data):
            raise FormatError("truncated ld.so.cache entry table")
        # a new-format cache may follow the old one (compat layout)
        new_at = (table + 7) & ~7
        if data[new_at:new_at + len(CACHE_MAGIC_NEW)] == CACHE_MAGIC_NEW:
            return _parse_new(data, new_at)
        entries = []
        for i in range(nlibs):
            _, key, value = _OLD_ENTRY.unpack_from(data, _OLD_HDR.size + i * _OLD_ENTRY.size)
            entries.append((_cstring(data, table + key), _cstring(data, table + value)))
        return LdSoCacheView(entries, "old")
    raise FormatError("unknown ld.so.cache format")


def parse_ld_so_cache(path):
    with open(path, "rb") as fh:
        return parse_ld_so_cache_bytes(fh.read())


# -- environment -------------------------------------------------------------

@dataclasses.dataclass
class LoaderEnv:
    mode: str
    loader_path: str  # host path of the loader used for explicit invocation
    library_path: list
    preload: str
    control_env: dict
    pathmap: PathMap = None
    container_dir: str = ""

    def environment(self, user_env):
        """Host environment for a program started in the container."""
        env = {k: v for k, v in user_env.items() if not k.startswith("UDOCKER_FK_")}
        env.update(self.control_env)
        uld = env.pop("LD_LIBRARY_PATH", None)
        upre = env.pop("LD_PRELOAD", None)
        mapped = []
        if uld is not None:
            env[ENV_ULDPATH] = uld
            mapped = [self.pathmap.to_host(d) if d.startswith("/") else d for d in uld.split(":") if d]
        env["LD_LIBRARY_PATH"] = ":".join(mapped + list(self.library_path))
        preload = [self.preload]
        if upre is not None:
            env[ENV_UPRELOAD] = upre
            preload += [self.pathmap.to_host(p) if p.startswith("/") else p for p in upre.split(":") if p]
        env["LD_PRELOAD"] = ":".join(preload)
        return env


def find_loader(pathmap):
    """Container path of the dynamic loader, or None."""
    for prog in PROBE_PROGRAMS:
        try:
            host = pathmap.to_host(prog)
            interp = read_interpreter(host) if os.path.isfile(host) else None
        except OSError:
            interp = None
        if interp and os.path.isfile(pathmap.to_host(interp)):
            return interp
    for cand in LOADER_CANDIDATES:
        if os.path.isfile(pathmap.to_host(cand)):
            return cand
    return None


def library_dirs(pathmap, view=None):
    """Host directories (inside the rootfs) to search for libraries."""
    out = []
    cdirs = list(view.directories()) if view is not None else []
    cdirs.extend(DEFAULT_LIB_DIRS)
    for d in cdirs:
        host = pathmap.to_host(d)
        if os.path.isdir(host) and host not in out:
            out.append(host)
    return out


def cache_view(pathmap):
    path = pathmap.to_host("/etc/ld.so.cache")
    try:
        return parse_ld_so_cache(path)
    except FileNotFoundError:
        log.debug("no ld.so.cache in container, scanning default directories")
    except FormatError as exc:
        log.warning("container ld.so.cache unusable (%s), scanning default directories", exc)
    return None


def _binds(spec):
    return [(b.host, b.container) for b in spec.binds] if spec is not None else []


def _prepare_f2(rootfs, loader_host, container_dir):
    journal = PatchJournal(container_dir)
    copy = os.path.join(container_dir, F2_LOADER)
    with journal.lock():
        meta = journal.meta()
        if meta and meta.get("mode") == "F2" and meta.get("rootfs") == rootfs and journal.committed() \
                and os.path.isfile(copy):
            return copy
        if journal.entries():
            journal.revert()
        with open(loader_host, "rb") as fh:
            data, count = loader_edits(fh.read())
        if count == 0:
            log.warning("no host search strings found in %s", loader_host)
        journal.record_meta(rootfs=rootfs, mode="F2", loader_host=loader_host)
        journal.create_file(copy, data, 0o755)
        journal.record_commit()
    return copy


def revert(container_dir):
    """Undo every loader-mode modification of a container."""
    journal = PatchJournal(container_dir)
    with journal.lock():
        return journal.revert()


def prepare(rootfs, mode, spec=None, container_dir=None, interposer=None):
    """Make ``rootfs`` runnable in loader mode ``mode``; returns a LoaderEnv."""
    if mode not in MODES:
        raise ValueError("not a loader mode: %s" % mode)
    rootfs = os.path.realpath(rootfs)
    container_dir = container_dir or os.path.dirname(rootfs)
    pathmap = PathMap(rootfs, _binds(spec))
    loader = find_loader(pathmap)
    if loader is None:
        raise ModeUnavailableError("no dynamic loader found in container for mode %s" % mode, fallback="P1")
    loader_host = pathmap.to_host(loader)
    view = cache_view(pathmap)
    libdirs = library_dirs(pathmap, view)
    if mode == "F1":
        loader_path = loader_host
    elif mode == "F2":
        loader_path = _prepare_f2(rootfs, loader_host, container_dir)
    else:
        plan = plan_and_apply(rootfs, mode, loader, PathMap(rootfs, sysdirs=()), container_dir)
        loader_path = (plan.journal.meta() or {}).get("loader_host", loader_host)
    control = {
        ENV_ROOT: rootfs,
        ENV_BINDS: "\n".join("%s\t%s" % hc for hc in pathmap.bind_list()),
        ENV_MODE: mode,
        ENV_LOADER: loader_path,
        ENV_LIBPATH: ":".join(libdirs),
        ENV_SELF: interposer or "",
        ENV_CDIR: container_dir,
    }
    if mode == "F4":
        control[ENV_PATCHER] = sys.executable
        control[ENV_PYPATH] = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    return LoaderEnv(mode, loader_path, libdirs, interposer or "", control, pathmap, container_dir)


def plan_initial_exec(lenv, spec):
    """(executable, argv) for starting ``spec.argv`` under ``lenv``."""
    pm = lenv.pathmap
    target = find_executable(pm, spec.argv[0], spec.env.get("PATH"), spec.cwd)
    argv = list(spec.argv)
    for _ in range(MAX_SHEBANG_DEPTH + 1):
        host = pm.to_host(target, spec.cwd)
        with open(host, "rb") as fh:
            head = fh.read(256)
        if not head.startswith(b"#!"):
            break
        parts = head[2:].split(b"\n", 1)[0].strip().split(None, 1)
        if not parts:
            raise FormatError("%s: empty interpreter line" % target)
        interp = os.fsdecode(parts[0])
        argv = [interp] + [os.fsdecode(p) for p in parts[1:]] + [target] + argv[1:]
        target = interp
    else:
        raise FormatError("%s: too many levels of interpreter scripts" % spec.argv[0])
    if not is_elf(host):
        raise FormatError("%s: not an executable format" % target)
    interp = read_interpreter(host)
    if interp is None:
        raise ModeUnavailableError(
            "%s is statically linked and cannot run in mode %s; use P1 or P2" % (target, lenv.mode), fallback="P1")
    if lenv.mode == "F4" and interp != lenv.loader_path:
        if patch_on_demand(lenv.container_dir, host) == 0:
            interp = read_interpreter(host)
    if lenv.mode in ("F3", "F4") and interp == lenv.loader_path:
        return host, argv
    libs = _rpath_dirs(pm, host)
    if libs:
        lenv.library_path = libs + [d for d in lenv.library_path if d not in libs]
    return lenv.loader_path, [lenv.loader_path, "--argv0", argv[0], host] + argv[1:]


def _rpath_dirs(pathmap, host):
    """DT_RPATH directories of ``host`` re-prefixed into the container."""
    try:
        info = read_elf(host)
    except FormatError:
        return []
    out = []
    for d in info.rpath:
        if d.startswith("/"):
            h = pathmap.to_host(d)
            if os.path.isdir(h):
                out.append(h)
    return out


class LoaderEngine:
    def __init__(self, mode="F1", interposer=None, container_dir=None):
        if mode not in MODES:
            raise ValueError("not a loader mode: %s" % mode)
        self.mode = mode
        self.interposer = interposer
        self.container_dir = container_dir
        self.env = None

    def prepare(self, rootfs, spec=None):
        if not self.interposer or not os.path.isfile(self.interposer):
            raise ModeUnavailableError("interposer library not installed (run 'udocker install')", fallback="P1")
        self.env = prepare(rootfs, self.mode, spec, self.container_dir, self.interposer)
        return self.env

    def run(self, spec, rootfs):
        lenv = self.prepare(rootfs, spec)
        try:
            exe, argv = plan_initial_exec(lenv, spec)
        except FileNotFoundError as exc:
            raise NotFoundError("%s: not found in container" % spec.argv[0]) from exc
        cwd = lenv.pathmap.to_host(spec.cwd)
        if not os.path.isdir(cwd):
            log.warning("working directory %s missing in container, using /", spec.cwd)
            cwd = lenv.pathmap.rootfs
        env = lenv.environment(spec.env)
        sys.stdout.flush()
        sys.stderr.flush()
        proc = subprocess.run(argv, executable=exe, env=env, cwd=cwd, check=False)
        code = proc.returncode
        return code if code >= 0 else 128 - code
