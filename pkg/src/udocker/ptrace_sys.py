"""ctypes bindings for ptrace, seccomp and a few process controls (x86_64)."""

import ctypes
import os

libc = ctypes.CDLL(None, use_errno=True)
libc.ptrace.restype = ctypes.c_long
libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]
libc.prctl.restype = ctypes.c_int
libc.prctl.argtypes = [ctypes.c_int, ctypes.c_ulong, ctypes.c_ulong, ctypes.c_ulong, ctypes.c_ulong]

PTRACE_TRACEME = 0
PTRACE_CONT = 7
PTRACE_KILL = 8
PTRACE_GETREGS = 12
PTRACE_SETREGS = 13
PTRACE_SYSCALL = 24
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETEVENTMSG = 0x4201
PTRACE_GETSIGINFO = 0x4202

PTRACE_O_TRACESYSGOOD = 0x1
PTRACE_O_TRACEFORK = 0x2
PTRACE_O_TRACEVFORK = 0x4
PTRACE_O_TRACECLONE = 0x8
PTRACE_O_TRACEEXEC = 0x10
PTRACE_O_TRACESECCOMP = 0x80
PTRACE_O_EXITKILL = 0x100000

PTRACE_EVENT_FORK = 1
PTRACE_EVENT_VFORK = 2
PTRACE_EVENT_CLONE = 3
PTRACE_EVENT_EXEC = 4
PTRACE_EVENT_SECCOMP = 7

PR_SET_SECCOMP = 22
PR_SET_NO_NEW_PRIVS = 38
PR_SET_CHILD_SUBREAPER = 36
PR_SET_PDEATHSIG = 1
SECCOMP_MODE_FILTER = 2

SECCOMP_RET_ALLOW = 0x7FFF0000
SECCOMP_RET_TRACE = 0x7FF00000
AUDIT_ARCH_X86_64 = 0xC000003E
X32_SYSCALL_BIT = 0x40000000

WALL = 0x40000000

_BPF_LD_W_ABS = 0x20
_BPF_JEQ_K = 0x15
_BPF_JGE_K = 0x35
_BPF_RET_K = 0x06

_REG_NAMES = (
    "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10", "r9", "r8", "rax", "rcx",
    "rdx", "rsi", "rdi", "orig_rax", "rip", "cs", "eflags", "rsp", "ss", "fs_base",
    "gs_base", "ds", "es", "fs", "gs",
)


class Regs(ctypes.Structure):
    _fields_ = [(n, ctypes.c_ulonglong) for n in _REG_NAMES]

    ARGS = ("rdi", "rsi", "rdx", "r10", "r8", "r9")

    def args(self):
        return [self.rdi, self.rsi, self.rdx, self.r10, self.r8, self.r9]

    def set_arg(self, index, value):
        setattr(self, self.ARGS[index], value & 0xFFFFFFFFFFFFFFFF)


class SockFilter(ctypes.Structure):
    _fields_ = [("code", ctypes.c_ushort), ("jt", ctypes.c_ubyte), ("jf", ctypes.c_ubyte), ("k", ctypes.c_uint)]


class SockFprog(ctypes.Structure):
    _fields_ = [("len", ctypes.c_ushort), ("filter", ctypes.POINTER(SockFilter))]


def _check(ret, what):
    if ret == -1:
        err = ctypes.get_errno()
        if err:
            raise OSError(err, "%s: %s" % (what, os.strerror(err)))
    return ret


def ptrace(request, pid, addr=0, data=0):
    ctypes.set_errno(0)
    return _check(libc.ptrace(request, pid, addr, data), "ptrace(%d)" % request)


def get_regs(pid, regs=None):
    regs = regs or Regs()
    ptrace(PTRACE_GETREGS, pid, 0, ctypes.addressof(regs))
    return regs


def set_regs(pid, regs):
    ptrace(PTRACE_SETREGS, pid, 0, ctypes.addressof(regs))


def get_event_msg(pid):
    msg = ctypes.c_ulong()
    ptrace(PTRACE_GETEVENTMSG, pid, 0, ctypes.addressof(msg))
    return msg.value


def is_group_stop(pid):
    """A stop with no siginfo is a group-stop (GETSIGINFO fails with EINVAL)."""
    buf = ctypes.create_string_buffer(128)
    try:
        ptrace(PTRACE_GETSIGINFO, pid, 0, ctypes.addressof(buf))
    except OSError as exc:
        return exc.errno == 22
    return False


def prctl(option, arg2=0, arg3=0, arg4=0, arg5=0):
    ctypes.set_errno(0)
    return _check(libc.prctl(option, arg2, arg3, arg4, arg5), "prctl(%d)" % option)


def build_filter(traced):
    """BPF program returning TRACE for ``traced`` syscall numbers, ALLOW otherwise.

    Foreign-ABI syscalls (i386 via int 0x80, x32) are always traced.
    """
    numbers = sorted(set(traced))
    if len(numbers) > 250:
        raise ValueError("too many traced syscalls for a linear filter")
    prog = [
        (_BPF_LD_W_ABS, 0, 0, 4),  # seccomp_data.arch
        (_BPF_JEQ_K, 1, 0, AUDIT_ARCH_X86_64),
        (_BPF_RET_K, 0, 0, SECCOMP_RET_TRACE),
        (_BPF_LD_W_ABS, 0, 0, 0),  # seccomp_data.nr
    ]
    # remaining layout: JGE x32, one JEQ per number, RET ALLOW, RET TRACE
    trace_at = len(prog) + 1 + len(numbers) + 1
    idx = len(prog)
    prog.append((_BPF_JGE_K, trace_at - idx - 1, 0, X32_SYSCALL_BIT))
    for nr in numbers:
        idx = len(prog)
        prog.append((_BPF_JEQ_K, trace_at - idx - 1, 0, nr))
    prog.append((_BPF_RET_K, 0, 0, SECCOMP_RET_ALLOW))
    prog.append((_BPF_RET_K, 0, 0, SECCOMP_RET_TRACE))
    return prog


def install_filter(prog):
    arr = (SockFilter * len(prog))(*[SockFilter(*ins) for ins in prog])
    fprog = SockFprog(len(prog), arr)
    prctl(PR_SET_NO_NEW_PRIVS, 1)
    ctypes.set_errno(0)
    ret = libc.prctl(PR_SET_SECCOMP, SECCOMP_MODE_FILTER, ctypes.addressof(fprog), 0, 0)
    _check(ret, "seccomp filter")
