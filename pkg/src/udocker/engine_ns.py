"""Mode R1: unprivileged user + mount + pid namespaces.

The native launcher forks a helper that unshares the namespaces and writes
single-entry id maps, then forks again so the container process is pid 1 of
the new pid namespace.  That process mounts /proc, a small /dev and the
binds, pivots into the rootfs and executes the command.  Alternatively an
OCI bundle is written and handed to an external runtime (runc, crun).
"""

import ctypes
import dataclasses
import errno
import json
import logging
import os
import shutil
import signal
import subprocess
import sys

from .errors import DelegationUnavailableError, ModeUnavailableError, NotFoundError
from .metadata import resolve_identity, to_oci

log = logging.getLogger(__name__)

CLONE_NEWNS = 0x00020000
CLONE_NEWUSER = 0x10000000
CLONE_NEWPID = 0x20000000
MS_RDONLY = 0x1
MS_NOSUID = 0x2
MS_NODEV = 0x4
MS_NOEXEC = 0x8
MS_REMOUNT = 0x20
MS_BIND = 0x1000
MS_REC = 0x4000
MS_PRIVATE = 0x40000
MNT_DETACH = 0x2
SYS_PIVOT_ROOT = 155

DEV_NODES = ("null", "zero", "full", "random", "urandom", "tty")
RUNTIMES = ("runc", "crun")
RUNTIME_ENV = "UDOCKER_OCI_RUNTIME"

_libc = ctypes.CDLL(None, use_errno=True)
_libc.mount.argtypes = [ctypes.c_char_p, ctypes.c_char_p, ctypes.c_char_p, ctypes.c_ulong, ctypes.c_void_p]
_libc.umount2.argtypes = [ctypes.c_char_p, ctypes.c_int]
_libc.unshare.argtypes = [ctypes.c_int]


def _err(what):
    e = ctypes.get_errno()
    return OSError(e, "%s: %s" % (what, os.strerror(e)))


def unshare(flags):
    if _libc.unshare(flags) != 0:
        raise _err("unshare")


def mount(source, target, fstype=None, flags=0, data=None):
    enc = lambda s: os.fsencode(s) if s is not None else None  # noqa: E731
    if _libc.mount(enc(source), enc(target), enc(fstype), flags, enc(data)) != 0:
        raise _err("mount %s" % target)


def pivot_root(new_root, put_old):
    if _libc.syscall(SYS_PIVOT_ROOT, os.fsencode(new_root), os.fsencode(put_old)) != 0:
        raise _err("pivot_root")


@dataclasses.dataclass(frozen=True)
class NamespacePlan:
    rootfs: str
    uid_map: tuple  # (container id, host id, 1)
    gid_map: tuple
    namespaces: frozenset = frozenset({"user", "mount", "pid"})
    proc_mount: bool = True

    @classmethod
    def for_spec(cls, spec, rootfs):
        ident = spec.identity or resolve_identity(None)
        return cls(os.path.realpath(rootfs), (ident.uid, os.getuid(), 1), (ident.gid, os.getgid(), 1))


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def probe():
    """True if this process may create user and mount namespaces."""
    pid = os.fork()
    if pid == 0:
        try:
            unshare(CLONE_NEWUSER | CLONE_NEWNS)
            os._exit(0)
        except BaseException:
            os._exit(1)
    _, status = os.waitpid(pid, 0)
    return os.WIFEXITED(status) and os.WEXITSTATUS(status) == 0


def check_available():
    if not probe():
        raise ModeUnavailableError("unprivileged user or mount namespaces are not permitted on this host")


def _mountpoint(path, is_dir, created):
    """Make sure ``path`` exists for a bind; remember what had to be created."""
    if os.path.lexists(path):
        return
    parent = os.path.dirname(path)
    if not os.path.isdir(parent):
        _mountpoint(parent, True, created)
    if is_dir:
        os.mkdir(path, 0o755)
    else:
        os.close(os.open(path, os.O_CREAT | os.O_WRONLY, 0o644))
    created.append(path)


def _inside(rootfs, cpath):
    """Host location of container path ``cpath`` without leaving rootfs."""
    out = rootfs
    for comp in cpath.strip("/").split("/"):
        if comp in ("", "."):
            continue
        if comp == "..":
            out = os.path.dirname(out) if out != rootfs else rootfs
            continue
        nxt = os.path.join(out, comp)
        if os.path.islink(nxt):
            target = os.readlink(nxt)
            base = rootfs if target.startswith("/") else out
            nxt = _inside(rootfs, os.path.join(base[len(rootfs):] or "/", target))
        out = nxt
    return out


def _setup_mounts(spec, plan, created):
    root = plan.rootfs
    mount(None, "/", None, MS_REC | MS_PRIVATE)
    mount(root, root, None, MS_BIND | MS_REC)
    for b in spec.binds:
        target = _inside(root, b.container)
        _mountpoint(target, os.path.isdir(b.host), created)
        mount(b.host, target, None, MS_BIND | MS_REC)
    if plan.proc_mount:
        proc = _inside(root, "/proc")
        _mountpoint(proc, True, created)
        mount("proc", proc, "proc", MS_NOSUID | MS_NODEV | MS_NOEXEC)
    if not any(b.container == "/dev" for b in spec.binds):
        dev = _inside(root, "/dev")
        _mountpoint(dev, True, created)
        mount("tmpfs", dev, "tmpfs", MS_NOSUID | MS_NOEXEC, "mode=755,size=64k")
        for name in DEV_NODES:
            src = "/dev/" + name
            if os.path.exists(src):
                node = os.path.join(dev, name)
                os.close(os.open(node, os.O_CREAT | os.O_WRONLY, 0o666))
                mount(src, node, None, MS_BIND)
        for name, target in (("fd", "/proc/self/fd"), ("stdin", "/proc/self/fd/0"),
                             ("stdout", "/proc/self/fd/1"), ("stderr", "/proc/self/fd/2")):
            os.symlink(target, os.path.join(dev, name))
        os.mkdir(os.path.join(dev, "shm"), 0o1777)
        mount("tmpfs", os.path.join(dev, "shm"), "tmpfs", MS_NOSUID | MS_NODEV, "mode=1777")
    os.chdir(root)
    pivot_root(".", ".")
    _libc.umount2(b".", MNT_DETACH)
    os.chdir("/")


def _container_main(spec, plan, report_fd):
    """pid 1 of the new pid namespace: mount, pivot, exec."""
    created = []
    try:
        _setup_mounts(spec, plan, created)
    except OSError as exc:
        os.write(report_fd, json.dumps({"created": created, "error": str(exc)}).encode() + b"\n")
        os.close(report_fd)
        os._exit(125)
    os.write(report_fd, json.dumps({"created": created}).encode() + b"\n")
    os.close(report_fd)
    try:
        os.chdir(spec.cwd)
    except OSError:
        sys.stderr.write("udocker: working directory %s missing in container, using /\n" % spec.cwd)
        os.chdir("/")
    env = dict(spec.env)
    try:
        os.execvpe(spec.argv[0], spec.argv, env)
    except FileNotFoundError:
        sys.stderr.write("udocker: %s: not found in container\n" % spec.argv[0])
        os._exit(127)
    except OSError as exc:
        sys.stderr.write("udocker: cannot execute %s: %s\n" % (spec.argv[0], exc.strerror))
        os._exit(126)


def _helper_main(spec, plan, report_fd):
    """Runs in the first child: enter namespaces, write maps, spawn pid 1."""
    try:
        unshare(CLONE_NEWUSER | CLONE_NEWNS | CLONE_NEWPID)
        _write("/proc/self/setgroups", "deny")
        _write("/proc/self/uid_map", "%d %d %d\n" % plan.uid_map)
        _write("/proc/self/gid_map", "%d %d %d\n" % plan.gid_map)
    except OSError as exc:
        os.write(report_fd, json.dumps({"created": [], "error": str(exc), "unavailable": True}).encode() + b"\n")
        os._exit(125)
    pid = os.fork()
    if pid == 0:
        _container_main(spec, plan, report_fd)
        os._exit(127)
    os.close(report_fd)
    for sig in (signal.SIGINT, signal.SIGTERM, signal.SIGHUP, signal.SIGQUIT):
        signal.signal(sig, lambda s, _f: os.kill(pid, s))
    while True:
        try:
            _, status = os.waitpid(pid, 0)
            break
        except InterruptedError:
            continue
    os._exit(os.WEXITSTATUS(status) if os.WIFEXITED(status) else 128 + os.WTERMSIG(status))


class NamespaceEngine:
    def __init__(self, delegate=False, runtime=None, container_dir=None):
        self.delegate = delegate
        self.runtime = runtime
        self.container_dir = container_dir

    def run(self, spec, rootfs):
        if self.delegate:
            return run_delegated(spec, rootfs, self.container_dir, self.runtime)
        return run_native(spec, NamespacePlan.for_spec(spec, rootfs))


def run_native(spec, plan):
    if not os.path.isdir(plan.rootfs):
        raise NotFoundError("rootfs %s does not exist" % plan.rootfs)
    rfd, wfd = os.pipe()
    sys.stdout.flush()
    sys.stderr.flush()
    pid = os.fork()
    if pid == 0:
        try:
            os.close(rfd)
            _helper_main(spec, plan, wfd)
        finally:
            os._exit(125)
    os.close(wfd)
    chunks = []
    while True:
        chunk = os.read(rfd, 65536)
        if not chunk:
            break
        chunks.append(chunk)
    os.close(rfd)
    while True:
        try:
            _, status = os.waitpid(pid, 0)
            break
        except InterruptedError:
            continue
    code = os.WEXITSTATUS(status) if os.WIFEXITED(status) else 128 + os.WTERMSIG(status)
    report = {}
    for raw in b"".join(chunks).splitlines():
        try:
            doc = json.loads(raw)
        except ValueError:
            continue
        report.setdefault("created", []).extend(doc.get("created", []))
        for key in ("error", "unavailable"):
            if key in doc:
                report[key] = doc[key]
    # mount points created in the rootfs are not part of the container
    for path in reversed(report.get("created", [])):
        try:
            if os.path.isdir(path) and not os.path.islink(path):
                os.rmdir(path)
            else:
                os.unlink(path)
        except OSError as exc:
            log.warning("could not remove mount point %s: %s", path, exc)
    if "error" in report:
        if report.get("unavailable"):
            raise ModeUnavailableError("user namespaces unavailable: %s" % report["error"])
        raise ModeUnavailableError("namespace setup failed: %s" % report["error"])
    return code


def find_runtime(name=None):
    candidates = [name] if name else [os.environ.get(RUNTIME_ENV)] + list(RUNTIMES)
    for cand in candidates:
        if not cand:
            continue
        path = shutil.which(cand)
        if path:
            return path
    raise DelegationUnavailableError("no OCI runtime (%s) found in PATH" % ", ".join(RUNTIMES))


def write_bundle(spec, rootfs, bundle_dir):
    """Materialize an OCI bundle; the rootfs is referenced by absolute path."""
    os.makedirs(bundle_dir, exist_ok=True)
    config = to_oci(spec, rootfs)
    tmp = os.path.join(bundle_dir, "config.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(config, fh, indent=2)
    os.replace(tmp, os.path.join(bundle_dir, "config.json"))
    return bundle_dir


def run_delegated(spec, rootfs, container_dir=None, runtime=None):
    exe = find_runtime(runtime)
    container_dir = container_dir or os.path.dirname(os.path.realpath(rootfs))
    bundle = write_bundle(spec, rootfs, os.path.join(container_dir, "bundle"))
    state = os.path.join(container_dir, "runtime-state")
    os.makedirs(state, exist_ok=True)
    cid = "udocker-%s-%d" % (os.path.basename(container_dir.rstrip("/")), os.getpid())
    cmd = [exe, "--root", state, "run", "--bundle", bundle, cid]
    log.info("delegating to %s", " ".join(cmd))
    sys.stdout.flush()
    sys.stderr.flush()
    try:
        proc = subprocess.run(cmd, check=False)
    except OSError as exc:
        if exc.errno in (errno.ENOENT, errno.EACCES):
            raise DelegationUnavailableError("cannot execute OCI runtime %s: %s" % (exe, exc)) from exc
        raise
    code = proc.returncode
    return code if code >= 0 else 128 - code
