"""Container path to host path translation.

A container path is resolved component by component in the container view:
the longest bind prefix wins, everything else lives below the rootfs.
Symbolic links are read on the host but interpreted in the container, so an
absolute link target restarts at the container root and ``..`` never climbs
above it.
"""

import collections
import errno
import logging
import os
import posixpath
import re
import stat

log = logging.getLogger(__name__)

MAXSYMLINKS = 40
DEFAULT_SYSDIRS = ("/dev", "/proc", "/sys")

PROC_MAGIC = re.compile(r"^/proc/\d+(?:/task/\d+)?/(?:cwd|root|exe|fd/\d+|map_files/[^/]+)$")


class PathEscape(OSError):
    """A path can only be followed through something outside the container."""

    def __init__(self, path, err=errno.ENOENT):
        super().__init__(err, os.strerror(err), path)


def normalize(path):
    """Lexical normalization with ``..`` clamped at the root."""
    out = []
    for comp in path.split("/"):
        if comp in ("", "."):
            continue
        if comp == "..":
            if out:
                out.pop()
            continue
        out.append(comp)
    return "/" + "/".join(out)


class PathMap:
    def __init__(self, rootfs, binds=(), sysdirs=DEFAULT_SYSDIRS):
        self.rootfs = os.path.realpath(rootfs)
        table = {}
        for host, cont in binds:
            if not (host.startswith("/") and cont.startswith("/")):
                raise ValueError("bind paths must be absolute: %r -> %r" % (host, cont))
            table[normalize(cont)] = os.path.realpath(host)
        for d in sysdirs or ():
            table.setdefault(d, d)
        self.binds = sorted(table.items(), key=lambda kv: len(kv[0]), reverse=True)
        # reverse lookup: host prefix -> container prefix, longest first
        rev = [(self.rootfs, "/")] + [(h, c) for c, h in self.binds]
        self._reverse = sorted(rev, key=lambda hc: len(hc[0]), reverse=True)

    def bind_list(self):
        return [(h, c) for c, h in self.binds]

    def lexical_host(self, cpath):
        """Host location of a normalized container path, without symlink resolution."""
        for cprefix, hprefix in self.binds:
            if cpath == cprefix:
                return hprefix
            if cprefix == "/" or cpath.startswith(cprefix + "/"):
                rest = cpath[len(cprefix):].lstrip("/")
                return hprefix + "/" + rest if rest else hprefix
        if cpath == "/":
            return self.rootfs
        return self.rootfs + cpath

    def to_container(self, hpath):
        """Reverse translation; returns None for host paths outside the view."""
        hpath = os.path.normpath(hpath)
        if hpath.startswith("//"):
            hpath = hpath[1:]
        for hprefix, cprefix in self._reverse:
            if hprefix == "/":
                return cprefix.rstrip("/") + hpath if cprefix != "/" else hpath
            if hpath == hprefix:
                return cprefix
            if hpath.startswith(hprefix + "/"):
                rest = hpath[len(hprefix):]
                return rest if cprefix == "/" else cprefix + rest
        return None

    def resolve(self, path, cwd="/", follow=True, pid=None, tid=None):
        """Resolve ``path`` in the container view.

        Returns ``(container_path, host_path)``.  With ``follow`` false the
        last component is not dereferenced.  ``pid``/``tid`` name the process
        on whose behalf /proc/self is interpreted (the caller's own process
        when omitted).
        """
        trailing = path.endswith("/") and path.strip("/") != ""
        if not path.startswith("/"):
            path = cwd.rstrip("/") + "/" + path
        comps = collections.deque(path.split("/"))
        resolved = []
        links = 0
        while comps:
            comp = comps.popleft()
            if comp in ("", "."):
                continue
            if comp == "..":
                if resolved:
                    resolved.pop()
                continue
            resolved.append(comp)
            last = all(c in ("", ".") for c in comps)
            if last and not follow and not trailing:
                break
            cpath = "/" + "/".join(resolved)
            hpath = self.lexical_host(cpath)
            target = None
            if pid is not None and hpath in ("/proc/self", "/proc/thread-self"):
                target = str(pid) if hpath == "/proc/self" else "%d/task/%d" % (pid, tid or pid)
            else:
                try:
                    st = os.lstat(hpath)
                except OSError:
                    if last:
                        continue
                    return self._dead_end(cpath, hpath, comps)
                if not stat.S_ISLNK(st.st_mode):
                    if not last and not stat.S_ISDIR(st.st_mode):
                        return self._dead_end(cpath, hpath, comps)
                    continue
                try:
                    target = os.readlink(hpath)
                except OSError:
                    continue
            links += 1
            if links > MAXSYMLINKS:
                raise PathEscape(path, errno.ELOOP)
            if PROC_MAGIC.match(hpath):
                # kernel magic link: its target is a host path
                mapped = self.to_container(target) if target.startswith("/") else None
                if mapped is None:
                    if last:
                        return cpath, hpath
                    raise PathEscape(path)
                target = mapped
            resolved.pop()
            if target.startswith("/"):
                resolved = []
            comps.extendleft(reversed(target.split("/")))
        cpath = "/" + "/".join(resolved)
        hpath = self.lexical_host(cpath)
        if trailing:
            cpath = cpath.rstrip("/") + "/"
            hpath = hpath.rstrip("/") + "/"
        return cpath, hpath

    @staticmethod
    def _dead_end(cpath, hpath, comps):
        # A missing or non-directory component in the middle: hand the kernel
        # a path that fails the same way (ENOENT/ENOTDIR) but holds no "..".
        rest = "/".join("." if c == ".." else c for c in comps if c)
        return cpath + "/" + rest, hpath + "/" + rest

    def to_host(self, path, cwd="/", follow=True, pid=None, tid=None):
        return self.resolve(path, cwd, follow, pid, tid)[1]
