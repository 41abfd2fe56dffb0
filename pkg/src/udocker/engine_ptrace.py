"""Chroot emulation by tracing the container process tree (modes P1 and P2).

Every system call that takes a pathname is stopped on entry; its path
arguments are resolved in the container view and replaced by host paths
written to scratch memory just below the tracee's stack red zone.  The
original argument registers are put back at syscall exit.

P1 asks the kernel (seccomp, SECCOMP_RET_TRACE) to stop only on the calls
listed in the policy; P2 stops on every system call.
"""

import dataclasses
import errno
import json
import logging
import os
import platform
import signal
import struct
import sys

from . import ptrace_sys as ps
from .elf_patcher import read_interpreter
from .errors import EngineFault, ModeUnavailableError, NotFoundError
from .pathmap import PROC_MAGIC, PathEscape, PathMap

log = logging.getLogger(__name__)

AT_FDCWD = -100
AT_SYMLINK_NOFOLLOW = 0x100
AT_SYMLINK_FOLLOW = 0x400
AT_EMPTY_PATH = 0x1000
O_CREAT, O_EXCL, O_NOFOLLOW = 0x40, 0x80, 0x20000
IN_DONT_FOLLOW = 0x02000000
PATH_MAX = 4096
RED_ZONE = 128
MAX_SHEBANG_DEPTH = 4

NR = dict(
    read=0, write=1, open=2, close=3, stat=4, fstat=5, lstat=6, access=21, execve=59,
    truncate=76, getcwd=79, chdir=80, fchdir=81, rename=82, mkdir=83, rmdir=84, creat=85,
    link=86, unlink=87, symlink=88, readlink=89, chmod=90, chown=92, fchown=93, lchown=94,
    getuid=102, getgid=104, setuid=105, setgid=106, geteuid=107, getegid=108, setreuid=113,
    setregid=114, setgroups=116, setresuid=117, getresuid=118, setresgid=119, getresgid=120,
    setfsuid=122, setfsgid=123, utime=132, mknod=133, uselib=134, statfs=137, pivot_root=155,
    chroot=161, acct=163, mount=165, umount2=166, swapon=167, swapoff=168, setxattr=188,
    lsetxattr=189, getxattr=191, lgetxattr=192, listxattr=194, llistxattr=195, removexattr=197,
    lremovexattr=198, utimes=235, inotify_add_watch=254, openat=257, mkdirat=258, mknodat=259,
    fchownat=260, futimesat=261, newfstatat=262, unlinkat=263, renameat=264, linkat=265,
    symlinkat=266, readlinkat=267, fchmodat=268, faccessat=269, utimensat=280,
    name_to_handle_at=303, renameat2=316, execveat=322, statx=332, open_tree=428,
    move_mount=429, fsopen=430, fsmount=432, fspick=433, openat2=437, faccessat2=439,
    mount_setattr=442, fchmodat2=452,
)
NAMES = {v: k for k, v in NR.items()}


def _follow(_args):
    return True


def _nofollow(_args):
    return False


def _at_flag(index):
    return lambda args: not (args[index] & AT_SYMLINK_NOFOLLOW)


def _open_flags(index):
    def rule(args):
        flags = args[index]
        if flags & O_NOFOLLOW:
            return False
        return not (flags & O_CREAT and flags & O_EXCL)
    return rule


# syscall -> [(dirfd arg index or None, path arg index, follow rule, flags arg for AT_EMPTY_PATH)]
PATH_ARGS = {
    NR["open"]: [(None, 0, _open_flags(1), None)],
    NR["creat"]: [(None, 0, _follow, None)],
    NR["stat"]: [(None, 0, _follow, None)],
    NR["lstat"]: [(None, 0, _nofollow, None)],
    NR["access"]: [(None, 0, _follow, None)],
    NR["truncate"]: [(None, 0, _follow, None)],
    NR["chdir"]: [(None, 0, _follow, None)],
    NR["rename"]: [(None, 0, _nofollow, None), (None, 1, _nofollow, None)],
    NR["mkdir"]: [(None, 0, _nofollow, None)],
    NR["rmdir"]: [(None, 0, _nofollow, None)],
    NR["link"]: [(None, 0, _nofollow, None), (None, 1, _nofollow, None)],
    NR["unlink"]: [(None, 0, _nofollow, None)],
    NR["symlink"]: [(None, 1, _nofollow, None)],
    NR["readlink"]: [(None, 0, _nofollow, None)],
    NR["chmod"]: [(None, 0, _follow, None)],
    NR["chown"]: [(None, 0, _follow, None)],
    NR["lchown"]: [(None, 0, _nofollow, None)],
    NR["utime"]: [(None, 0, _follow, None)],
    NR["uselib"]: [(None, 0, _follow, None)],
    NR["statfs"]: [(None, 0, _follow, None)],
    NR["setxattr"]: [(None, 0, _follow, None)],
    NR["lsetxattr"]: [(None, 0, _nofollow, None)],
    NR["getxattr"]: [(None, 0, _follow, None)],
    NR["lgetxattr"]: [(None, 0, _nofollow, None)],
    NR["listxattr"]: [(None, 0, _follow, None)],
    NR["llistxattr"]: [(None, 0, _nofollow, None)],
    NR["removexattr"]: [(None, 0, _follow, None)],
    NR["lremovexattr"]: [(None, 0, _nofollow, None)],
    NR["utimes"]: [(None, 0, _follow, None)],
    NR["inotify_add_watch"]: [(None, 1, lambda a: not (a[2] & IN_DONT_FOLLOW), None)],
    NR["openat"]: [(0, 1, _open_flags(2), None)],
    NR["mkdirat"]: [(0, 1, _nofollow, None)],
    NR["fchownat"]: [(0, 1, _at_flag(4), 4)],
    NR["futimesat"]: [(0, 1, _follow, None)],
    NR["newfstatat"]: [(0, 1, _at_flag(3), 3)],
    NR["unlinkat"]: [(0, 1, _nofollow, None)],
    NR["renameat"]: [(0, 1, _nofollow, None), (2, 3, _nofollow, None)],
    NR["renameat2"]: [(0, 1, _nofollow, None), (2, 3, _nofollow, None)],
    NR["linkat"]: [(0, 1, lambda a: bool(a[4] & AT_SYMLINK_FOLLOW), 4), (2, 3, _nofollow, None)],
    NR["symlinkat"]: [(1, 2, _nofollow, None)],
    NR["readlinkat"]: [(0, 1, _nofollow, None)],
    NR["fchmodat"]: [(0, 1, _follow, None)],
    NR["faccessat"]: [(0, 1, _follow, None)],
    NR["utimensat"]: [(0, 1, _at_flag(3), None)],
    NR["name_to_handle_at"]: [(0, 1, lambda a: bool(a[4] & AT_SYMLINK_FOLLOW), 4)],
    NR["statx"]: [(0, 1, _at_flag(2), 2)],
    NR["openat2"]: [(0, 1, _follow, None)],
    NR["faccessat2"]: [(0, 1, _at_flag(3), None)],
    NR["fchmodat2"]: [(0, 1, _at_flag(3), None)],
}
EXEC_NRS = {NR["execve"], NR["execveat"]}
OPEN_NRS = {NR["open"], NR["openat"], NR["creat"], NR["openat2"]}
READLINK_NRS = {NR["readlink"]: (1, 2), NR["readlinkat"]: (2, 3)}  # buf, size arg indexes
DENIED = {NR[n] for n in (
    "mknod", "mknodat", "mount", "umount2", "pivot_root", "chroot", "acct", "swapon", "swapoff",
    "open_tree", "move_mount", "fsopen", "fsmount", "fspick", "mount_setattr",
)}
UID_QUERIES = {NR["getuid"], NR["geteuid"]}
GID_QUERIES = {NR["getgid"], NR["getegid"]}
ID_SETTERS = {NR[n] for n in ("setuid", "setgid", "setreuid", "setregid", "setresuid", "setresgid", "setgroups")}
CHOWN_NRS = {NR["chown"], NR["fchown"], NR["lchown"], NR["fchownat"]}
IDENTITY_NRS = UID_QUERIES | GID_QUERIES | ID_SETTERS | CHOWN_NRS | {
    NR["getresuid"], NR["getresgid"], NR["setfsuid"], NR["setfsgid"]}


@dataclasses.dataclass(frozen=True)
class SyscallPolicy:
    traced_set: frozenset
    mode: str = "P1"

    @classmethod
    def for_spec(cls, mode="P1", emulate_identity=False):
        traced = set(PATH_ARGS) | EXEC_NRS | DENIED | {NR["getcwd"]}
        if emulate_identity:
            traced |= IDENTITY_NRS
        return cls(frozenset(traced), mode)


def install_seccomp_filter(policy):
    """Install the P1 filter in the calling process (to be inherited by exec)."""
    ps.install_filter(ps.build_filter(policy.traced_set))


def translate(pathmap, cwd, raw_path, follow=True, pid=None, tid=None):
    """Host path for ``raw_path`` as seen from a process whose cwd is ``cwd``."""
    return pathmap.resolve(raw_path, cwd, follow, pid, tid)[1]


def find_executable(pathmap, name, env_path, cwd="/"):
    """Locate argv[0] inside the container like execvp would."""
    if "/" in name:
        host = pathmap.to_host(name, cwd)
        if os.path.isfile(host):
            return name
        raise NotFoundError("%s: not found in container" % name)
    for d in (env_path or "").split(":"):
        if not d:
            continue
        cand = d.rstrip("/") + "/" + name
        host = pathmap.to_host(cand, cwd)
        if os.path.isfile(host) and os.access(host, os.X_OK):
            return cand
    raise NotFoundError("%s: command not found in container PATH" % name)


def _signed(value):
    return value - (1 << 64) if value & (1 << 63) else value


class _FsState:
    __slots__ = ("cwd", "host")

    def __init__(self, cwd=None, host=None):
        self.cwd = cwd
        self.host = host


class _Pending:
    __slots__ = ("nr", "saved", "result", "cwd", "readlink", "execd", "memory")

    def __init__(self, nr, saved):
        self.nr = nr
        self.saved = saved
        self.result = None
        self.cwd = None
        self.readlink = False
        self.execd = False
        self.memory = None


class _Task:
    __slots__ = ("tid", "tgid", "fs", "memfd", "pending", "in_syscall", "fresh")

    def __init__(self, tid, fs=None, fresh=False):
        self.tid = tid
        self.tgid = None
        self.fs = fs or _FsState()
        self.memfd = None
        self.pending = None
        self.in_syscall = False
        self.fresh = fresh


class _Deny(Exception):
    def __init__(self, err):
        self.err = err


class Tracer:
    """Runs inside the dedicated tracer process."""

    def __init__(self, pathmap, mode, identity=None, audit=False):
        self.map = pathmap
        self.mode = mode
        self.identity = identity
        self.audit = audit
        self.tasks = {}
        self.regs = ps.Regs()
        self.stats = {
            "mode": mode, "stops": 0, "seccomp_stops": 0, "syscall_stops": 0,
            "signal_stops": 0, "syscalls": {}, "downgraded": False,
        }
        self.opened = []
        self.root_status = None

    # -- tracee memory ----------------------------------------------------

    def _mem(self, task):
        if task.memfd is None:
            task.memfd = os.open("/proc/%d/mem" % task.tid, os.O_RDWR | os.O_CLOEXEC)
        return task.memfd

    def _drop_mem(self, task):
        if task.memfd is not None:
            os.close(task.memfd)
            task.memfd = None

    def read_string(self, task, addr):
        fd = self._mem(task)
        out = bytearray()
        while len(out) <= PATH_MAX:
            n = 4096 - (addr % 4096)
            chunk = os.pread(fd, n, addr)
            if not chunk:
                raise _Deny(errno.EFAULT)
            pos = chunk.find(b"\0")
            if pos >= 0:
                out.extend(chunk[:pos])
                return bytes(out)
            out.extend(chunk)
            addr += n
        raise _Deny(errno.ENAMETOOLONG)

    def read_mem(self, task, addr, size):
        return os.pread(self._mem(task), size, addr)

    def write_mem(self, task, addr, data):
        try:
            os.pwrite(self._mem(task), data, addr)
        except OSError as exc:
            raise _Deny(errno.EFAULT) from exc

    # -- process context -------------------------------------------------

    def tgid(self, task):
        if task.tgid is None:
            try:
                with open("/proc/%d/status" % task.tid) as fh:
                    for line in fh:
                        if line.startswith("Tgid:"):
                            task.tgid = int(line.split()[1])
                            break
            except OSError:
                task.tgid = task.tid
        return task.tgid

    def container_cwd(self, task):
        try:
            kernel = os.readlink("/proc/%d/cwd" % task.tid)
        except OSError:
            return task.fs.cwd or "/"
        if task.fs.cwd is not None and task.fs.host == kernel:
            return task.fs.cwd
        cwd = self.map.to_container(kernel) or "/"
        task.fs = _FsState(cwd, kernel)
        return cwd

    def fd_path(self, task, fd):
        try:
            host = os.readlink("/proc/%d/fd/%d" % (task.tid, fd))
        except OSError:
            raise _Deny(errno.EBADF) from None
        cpath = self.map.to_container(host)
        if cpath is None:
            raise _Deny(errno.EACCES)
        return cpath

    def resolve(self, task, raw, base, follow):
        path = raw.decode("utf-8", "surrogateescape")
        try:
            return self.map.resolve(path, base, follow, pid=self.tgid(task), tid=task.tid)
        except PathEscape as exc:
            raise _Deny(exc.errno) from None

    # -- syscall entry ----------------------------------------------------

    def scratch(self, regs, size):
        return (regs.rsp - RED_ZONE - size - 16) & ~0xF

    def place(self, task, regs, blobs):
        """Write byte strings below the red zone; returns their addresses."""
        total = sum(len(b) + 8 for b in blobs)
        base = self.scratch(regs, total)
        addrs, buf = [], bytearray()
        for b in blobs:
            addrs.append(base + len(buf))
            buf.extend(b)
            buf.extend(b"\0" * (-len(buf) % 8))
        self.write_mem(task, base, bytes(buf))
        return addrs

    def on_entry(self, task, regs):
        """Return True when the syscall exit must be seen."""
        nr = regs.orig_rax
        name = NAMES.get(nr, nr)
        counts = self.stats["syscalls"]
        counts[name] = counts.get(name, 0) + 1
        pending = _Pending(nr, regs.args())
        try:
            if nr in DENIED:
                return self.skip(task, regs, pending, -errno.EPERM)
            if nr == NR["getcwd"]:
                return self.emulate_getcwd(task, regs, pending)
            if self.identity is not None and nr in IDENTITY_NRS:
                return self.emulate_identity(task, regs, pending)
            if nr in EXEC_NRS:
                return self.rewrite_exec(task, regs, pending)
            spec = PATH_ARGS.get(nr)
            if spec is None:
                return False
            args = pending.saved
            blobs, slots = [], []
            for dfd_idx, p_idx, follow_rule, flags_idx in spec:
                addr = args[p_idx]
                if addr == 0:
                    continue
                raw = self.read_string(task, addr)
                if not raw:
                    continue
                if raw.startswith(b"/"):
                    base = "/"
                elif dfd_idx is None or _signed(args[dfd_idx]) & 0xFFFFFFFF == AT_FDCWD & 0xFFFFFFFF:
                    base = self.container_cwd(task)
                else:
                    base = self.fd_path(task, args[dfd_idx] & 0xFFFFFFFF)
                cpath, hpath = self.resolve(task, raw, base, follow_rule(args))
                if nr == NR["chdir"]:
                    pending.cwd = cpath
                if nr in READLINK_NRS and PROC_MAGIC.match(hpath):
                    pending.readlink = True
                blobs.append(os.fsencode(hpath) + b"\0")
                slots.append(p_idx)
            if not blobs:
                return False
            for idx, addr in zip(slots, self.place(task, regs, blobs)):
                regs.set_arg(idx, addr)
            ps.set_regs(task.tid, regs)
        except _Deny as exc:
            return self.skip(task, regs, pending, -exc.err)
        task.pending = pending
        return True

    def skip(self, task, regs, pending, result):
        regs.orig_rax = 0xFFFFFFFFFFFFFFFF
        ps.set_regs(task.tid, regs)
        pending.result = result
        task.pending = pending
        return True

    def emulate_getcwd(self, task, regs, pending):
        buf, size = regs.rdi, regs.rsi
        cwd = os.fsencode(self.container_cwd(task)) + b"\0"
        if len(cwd) > size:
            return self.skip(task, regs, pending, -errno.ERANGE)
        pending.memory = (buf, cwd)
        return self.skip(task, regs, pending, len(cwd))

    def emulate_identity(self, task, regs, pending):
        ident = self.identity
        nr = pending.nr
        if nr in UID_QUERIES:
            return self.skip(task, regs, pending, ident.uid)
        if nr in GID_QUERIES:
            return self.skip(task, regs, pending, ident.gid)
        if nr == NR["getresuid"] or nr == NR["getresgid"]:
            value = ident.uid if nr == NR["getresuid"] else ident.gid
            pending.memory = [(a, struct.pack("<I", value)) for a in regs.args()[:3]]
            return self.skip(task, regs, pending, 0)
        if nr == NR["setfsuid"]:
            return self.skip(task, regs, pending, ident.uid)
        if nr == NR["setfsgid"]:
            return self.skip(task, regs, pending, ident.gid)
        return self.skip(task, regs, pending, 0)

    def rewrite_exec(self, task, regs, pending):
        args = pending.saved
        if pending.nr == NR["execveat"]:
            dfd, path_addr, argv_addr, flags = args[0], args[1], args[2], args[4]
        else:
            dfd, path_addr, argv_addr, flags = AT_FDCWD, args[0], args[1], 0
        raw = self.read_string(task, path_addr)
        if not raw and flags & AT_EMPTY_PATH:
            return False
        if raw.startswith(b"/"):
            base = "/"
        elif _signed(dfd) & 0xFFFFFFFF == AT_FDCWD & 0xFFFFFFFF:
            base = self.container_cwd(task)
        else:
            base = self.fd_path(task, dfd & 0xFFFFFFFF)
        argv = self.read_argv(task, argv_addr)
        cpath = raw.decode("utf-8", "surrogateescape")
        if not cpath.startswith("/") and base != "/":
            cpath = base.rstrip("/") + "/" + cpath
        new_argv = None
        for _ in range(MAX_SHEBANG_DEPTH + 1):
            _, hpath = self.resolve(task, os.fsencode(cpath), "/", True)
            try:
                with open(hpath, "rb") as fh:
                    head = fh.read(256)
            except IsADirectoryError:
                raise _Deny(errno.EACCES) from None
            except OSError as exc:
                raise _Deny(exc.errno or errno.ENOENT) from None
            if head.startswith(b"#!"):
                line = head[2:].split(b"\n", 1)[0].strip()
                if not line:
                    raise _Deny(errno.ENOEXEC)
                parts = line.split(None, 1)
                interp = parts[0].decode("utf-8", "surrogateescape")
                rest = [parts[1]] if len(parts) > 1 else []
                argv = [parts[0]] + rest + [os.fsencode(cpath)] + argv[1:]
                cpath = interp
                new_argv = argv
                continue
            break
        else:
            raise _Deny(errno.ELOOP)
        interp = read_interpreter(hpath)
        if interp:
            _, loader_host = self.resolve(task, os.fsencode(interp), "/", True)
            if not os.path.isfile(loader_host):
                raise _Deny(errno.ENOENT)
            target = cpath if "/" in cpath else "./" + cpath
            argv0 = argv[0] if argv else os.fsencode(target)
            new_argv = [os.fsencode(interp), b"--argv0", argv0, os.fsencode(target)] + argv[1:]
            hpath = loader_host
        blobs = [os.fsencode(hpath) + b"\0"]
        if new_argv is not None:
            blobs.extend(a + b"\0" for a in new_argv)
        # pointer array goes right after the strings
        strings_size = sum(len(b) + (-len(b) % 8) for b in blobs)
        ptr_count = len(new_argv) + 1 if new_argv is not None else 0
        base_addr = self.scratch(regs, strings_size + 8 * ptr_count)
        buf, addrs = bytearray(), []
        for b in blobs:
            addrs.append(base_addr + len(buf))
            buf.extend(b)
            buf.extend(b"\0" * (-len(buf) % 8))
        if new_argv is not None:
            argv_at = base_addr + len(buf)
            buf.extend(struct.pack("<%dQ" % ptr_count, *(addrs[1:] + [0])))
        self.write_mem(task, base_addr, bytes(buf))
        if pending.nr == NR["execveat"]:
            regs.set_arg(1, addrs[0])
            if new_argv is not None:
                regs.set_arg(2, argv_at)
        else:
            regs.set_arg(0, addrs[0])
            if new_argv is not None:
                regs.set_arg(1, argv_at)
        ps.set_regs(task.tid, regs)
        task.pending = pending
        return True

    def read_argv(self, task, addr):
        argv = []
        while addr and len(argv) < 65536:
            ptr = struct.unpack("<Q", self.read_mem(task, addr, 8))[0]
            if ptr == 0:
                break
            argv.append(self.read_string_any(task, ptr))
            addr += 8
        return argv

    def read_string_any(self, task, addr):
        fd = self._mem(task)
        out = bytearray()
        while True:
            n = 4096 - (addr % 4096)
            chunk = os.pread(fd, n, addr)
            if not chunk:
                raise _Deny(errno.EFAULT)
            pos = chunk.find(b"\0")
            if pos >= 0:
                out.extend(chunk[:pos])
                return bytes(out)
            out.extend(chunk)
            addr += n

    # -- syscall exit -----------------------------------------------------

    def on_exit(self, task, regs):
        pending = task.pending
        task.pending = None
        if pending is None or pending.execd:
            return
        rax = _signed(regs.rax)
        if pending.result is not None:
            if pending.memory is not None and pending.result >= 0:
                writes = pending.memory if isinstance(pending.memory, list) else [pending.memory]
                try:
                    for addr, data in writes:
                        self.write_mem(task, addr, data)
                except _Deny:
                    pending.result = -errno.EFAULT
            regs.rax = pending.result & 0xFFFFFFFFFFFFFFFF
        else:
            if pending.cwd is not None and rax == 0:
                try:
                    task.fs = _FsState(pending.cwd, os.readlink("/proc/%d/cwd" % task.tid))
                except OSError:
                    pass
            if pending.readlink and rax > 0:
                self.fix_readlink(task, regs, pending, rax)
            if self.audit and pending.nr in OPEN_NRS and rax >= 0:
                try:
                    self.opened.append(os.readlink("/proc/%d/fd/%d" % (task.tid, rax)))
                except OSError:
                    pass
        for i, value in enumerate(pending.saved):
            regs.set_arg(i, value)
        ps.set_regs(task.tid, regs)

    def fix_readlink(self, task, regs, pending, length):
        buf_idx, size_idx = READLINK_NRS[pending.nr]
        buf, size = pending.saved[buf_idx], pending.saved[size_idx]
        try:
            content = self.read_mem(task, buf, length)
        except OSError:
            return
        if not content.startswith(b"/"):
            return
        mapped = self.map.to_container(os.fsdecode(content))
        if mapped is None:
            return
        data = os.fsencode(mapped)[:size]
        self.write_mem(task, buf, data)
        regs.rax = len(data)

    # -- main loop --------------------------------------------------------

    def resume(self, task, sig=0, need_exit=False):
        if self.mode == "P2" or need_exit:
            req = ps.PTRACE_SYSCALL
        else:
            req = ps.PTRACE_CONT
        try:
            ps.ptrace(req, task.tid, 0, sig)
        except ProcessLookupError:
            pass

    def task(self, tid):
        t = self.tasks.get(tid)
        if t is None:
            t = self.tasks[tid] = _Task(tid, fresh=True)
        return t

    def forget(self, tid):
        t = self.tasks.pop(tid, None)
        if t is not None:
            self._drop_mem(t)

    def loop(self, root):
        while True:
            try:
                tid, status = os.waitpid(-1, ps.WALL)
            except ChildProcessError:
                break
            except InterruptedError:
                continue
            if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                if tid == root:
                    self.root_status = status
                self.forget(tid)
                continue
            if not os.WIFSTOPPED(status):
                continue
            task = self.task(tid)
            sig = os.WSTOPSIG(status)
            event = status >> 16
            self.stats["stops"] += 1
            try:
                self.dispatch(task, sig, event)
            except ProcessLookupError:
                self.forget(tid)
            except OSError as exc:
                if exc.errno == errno.ESRCH:
                    self.forget(tid)
                    continue
                raise EngineFault("tracer lost control of task %d: %s" % (tid, exc)) from exc

    def dispatch(self, task, sig, event):
        if sig == (signal.SIGTRAP | 0x80):
            self.stats["syscall_stops"] += 1
            regs = ps.get_regs(task.tid, self.regs)
            if task.in_syscall:
                task.in_syscall = False
                self.on_exit(task, regs)
                self.resume(task)
            else:
                task.in_syscall = True
                need = self.on_entry(task, regs)
                if self.mode == "P1" and not need:
                    task.in_syscall = False
                self.resume(task, need_exit=need)
            return
        if sig == signal.SIGTRAP and event:
            if event == ps.PTRACE_EVENT_SECCOMP:
                self.stats["seccomp_stops"] += 1
                regs = ps.get_regs(task.tid, self.regs)
                need = self.on_entry(task, regs)
                task.in_syscall = need
                self.resume(task, need_exit=need)
                return
            if event in (ps.PTRACE_EVENT_FORK, ps.PTRACE_EVENT_VFORK, ps.PTRACE_EVENT_CLONE):
                child_tid = ps.get_event_msg(task.tid)
                child = self.task(child_tid)
                child.fs = _FsState(task.fs.cwd, task.fs.host)
                if event == ps.PTRACE_EVENT_CLONE:
                    child.tgid = task.tgid
                self.resume(task, need_exit=task.in_syscall)
                return
            if event == ps.PTRACE_EVENT_EXEC:
                former = ps.get_event_msg(task.tid)
                if former != task.tid:
                    self.forget(former)
                self._drop_mem(task)
                task.tgid = task.tid
                if task.pending is not None:
                    task.pending.execd = True
                self.resume(task, need_exit=task.in_syscall)
                return
            self.resume(task, need_exit=task.in_syscall)
            return
        self.stats["signal_stops"] += 1
        if task.fresh and sig == signal.SIGSTOP:
            task.fresh = False
            self.resume(task)
            return
        task.fresh = False
        if ps.is_group_stop(task.tid):
            self.resume(task)
            return
        self.resume(task, sig, need_exit=task.in_syscall)


def _tracee(host_cwd, exec_path, argv, env, mode, policy, report_fd, force_seccomp_failure):
    try:
        os.chdir(host_cwd)
        ps.ptrace(ps.PTRACE_TRACEME, 0)
        os.kill(os.getpid(), signal.SIGSTOP)
        ok = b"1"
        if mode == "P1":
            try:
                if force_seccomp_failure:
                    raise OSError(errno.EINVAL, "seccomp disabled for testing")
                install_seccomp_filter(policy)
            except OSError:
                ok = b"0"
        os.write(report_fd, ok)
        os.close(report_fd)
        os.kill(os.getpid(), signal.SIGSTOP)
        os.execve(exec_path, argv, env)
    except OSError as exc:
        sys.stderr.write("udocker: cannot execute %s: %s\n" % (exec_path, exc.strerror))
        sys.stderr.flush()
        os._exit(126 if exc.errno in (errno.EACCES, errno.ENOEXEC) else 127)
    os._exit(127)


def _tracer_main(spec, pathmap, mode, argv0, stats_fd, audit, force_seccomp_failure):
    signal.signal(signal.SIGINT, signal.SIG_IGN)
    signal.signal(signal.SIGQUIT, signal.SIG_IGN)
    ps.prctl(ps.PR_SET_CHILD_SUBREAPER, 1)
    ident = spec.identity if spec.emulate_identity else None
    policy = SyscallPolicy.for_spec(mode, ident is not None)
    host_cwd = pathmap.to_host(spec.cwd)
    if not os.path.isdir(host_cwd):
        log.warning("working directory %s missing in container, using /", spec.cwd)
        host_cwd, spec.cwd = pathmap.rootfs, "/"
    argv = [os.fsencode(a) for a in [argv0] + list(spec.argv[1:])]
    argv[0] = os.fsencode(spec.argv[0])
    env = {os.fsencode(k): os.fsencode(v) for k, v in spec.env.items()}
    rfd, wfd = os.pipe()
    pid = os.fork()
    if pid == 0:
        os.close(rfd)
        _tracee(host_cwd, os.fsencode(argv0), argv, env, mode, policy, wfd, force_seccomp_failure)
    os.close(wfd)
    tracer = Tracer(pathmap, mode, ident, audit)
    root = tracer.task(pid)
    root.fs = _FsState(spec.cwd, os.path.realpath(host_cwd))
    root.fresh = False
    _, status = os.waitpid(pid, ps.WALL)
    if not os.WIFSTOPPED(status):
        return _finish(tracer, status, stats_fd)
    opts = (ps.PTRACE_O_TRACESYSGOOD | ps.PTRACE_O_TRACEFORK | ps.PTRACE_O_TRACEVFORK
            | ps.PTRACE_O_TRACECLONE | ps.PTRACE_O_TRACEEXEC | ps.PTRACE_O_EXITKILL)
    if mode == "P1":
        opts |= ps.PTRACE_O_TRACESECCOMP
    ps.ptrace(ps.PTRACE_SETOPTIONS, pid, 0, opts)
    ps.ptrace(ps.PTRACE_CONT, pid, 0, 0)
    ok = os.read(rfd, 1)
    os.close(rfd)
    if mode == "P1" and ok != b"1":
        log.warning("seccomp filtering unavailable: mode downgraded to P2")
        tracer.mode = "P2"
        tracer.stats["downgraded"] = True
        tracer.stats["mode"] = "P2"
    _, status = os.waitpid(pid, ps.WALL)
    if not os.WIFSTOPPED(status):
        return _finish(tracer, status, stats_fd)
    tracer.resume(root)
    tracer.loop(pid)
    return _finish(tracer, tracer.root_status, stats_fd)


def _finish(tracer, status, stats_fd):
    stats = dict(tracer.stats)
    if tracer.audit:
        stats["opened"] = tracer.opened
    if status is None:
        code = 255
    elif os.WIFEXITED(status):
        code = os.WEXITSTATUS(status)
    else:
        code = 128 + os.WTERMSIG(status)
    stats["exit_code"] = code
    data = json.dumps(stats).encode()
    view = memoryview(data)
    while view:
        n = os.write(stats_fd, view)
        view = view[n:]
    return code


class PtraceEngine:
    """Runs an ExecSpec under P1 (seccomp assisted) or P2 (trace everything)."""

    def __init__(self, mode="P1", audit=False, force_seccomp_failure=False, sysdirs=None):
        if mode not in ("P1", "P2"):
            raise ValueError("ptrace engine modes are P1 and P2")
        self.mode = mode
        self.audit = audit
        self.force_seccomp_failure = force_seccomp_failure
        self.sysdirs = sysdirs
        self.stats = {}

    @staticmethod
    def check_available():
        if platform.machine() != "x86_64":
            raise ModeUnavailableError("ptrace engine supports x86_64 hosts only", fallback="R1")

    def pathmap(self, spec, rootfs):
        binds = [(b.host, b.container) for b in spec.binds]
        if self.sysdirs is None:
            return PathMap(rootfs, binds)
        return PathMap(rootfs, binds, self.sysdirs)

    def run(self, spec, rootfs=None, pathmap=None):
        self.check_available()
        pathmap = pathmap or self.pathmap(spec, rootfs)
        argv0 = find_executable(pathmap, spec.argv[0], spec.env.get("PATH"), spec.cwd)
        rfd, wfd = os.pipe()
        sys.stdout.flush()
        sys.stderr.flush()
        pid = os.fork()
        if pid == 0:
            code = 255
            try:
                os.close(rfd)
                code = _tracer_main(spec, pathmap, self.mode, argv0, wfd, self.audit, self.force_seccomp_failure)
            except BaseException as exc:  # never return into the caller's stack
                try:
                    sys.stderr.write("udocker: tracer failure: %s\n" % exc)
                    sys.stderr.flush()
                finally:
                    os._exit(250)
            os._exit(code)
        os.close(wfd)
        chunks = []
        while True:
            chunk = os.read(rfd, 65536)
            if not chunk:
                break
            chunks.append(chunk)
        os.close(rfd)
        _, status = os.waitpid(pid, 0)
        code = os.WEXITSTATUS(status) if os.WIFEXITED(status) else 128 + os.WTERMSIG(status)
        try:
            self.stats = json.loads(b"".join(chunks) or b"{}")
        except ValueError:
            self.stats = {}
        if code == 250 and not self.stats:
            raise EngineFault("tracer process failed")
        if self.stats.get("downgraded"):
            log.warning("mode %s downgraded to P2 (seccomp unavailable)", self.mode)
        return code


def run(spec, pathmap, mode="P1", **options):
    engine = PtraceEngine(mode, **options)
    return engine.run(spec, pathmap=pathmap)
