"""Flatten Docker image layers into a plain directory tree.

Layers are applied base first.  Whiteout markers in a layer hide entries of
the layers below it:

* ``.wh.<name>`` removes ``<name>`` from the lower layers;
* ``.wh..wh..opq`` empties the lower-layer content of its directory.

Whiteouts never affect entries that live in the same layer, so each layer is
processed in two passes: deletions first, then extraction of the regular
entries.  Extraction is done member by member (never ``extractall``) so that
every target path can be checked before anything is written.
"""

import dataclasses
import logging
import os
import shutil
import stat
import tarfile
import tempfile

from .errors import FormatError, RejectedEntryError

log = logging.getLogger(__name__)

WHITEOUT_PREFIX = ".wh."
OPAQUE_MARKER = ".wh..wh..opq"

GZIP_MAGIC = b"\x1f\x8b"
ZSTD_MAGIC = b"\x28\xb5\x2f\xfd"


@dataclasses.dataclass(frozen=True)
class WhiteoutEntry:
    kind: str  # "file-whiteout" or "opaque-dir"
    target: str  # container-relative path, no leading slash


@dataclasses.dataclass(frozen=True)
class ExtractionPolicy:
    strip_setuid: bool = True
    max_path_depth: int = 256
    # Fixed: device nodes cannot be created unprivileged, and nothing is
    # ever allowed to resolve outside the destination.
    skip_devices: bool = dataclasses.field(default=True, init=False)
    allow_symlink_escape: bool = dataclasses.field(default=False, init=False)


DEFAULT_POLICY = ExtractionPolicy()


def parse_whiteout(relpath):
    """Return the WhiteoutEntry encoded by a layer path, or None."""
    parent, _, base = relpath.rpartition("/")
    if not base.startswith(WHITEOUT_PREFIX):
        return None
    if base == OPAQUE_MARKER:
        return WhiteoutEntry("opaque-dir", parent)
    if base.startswith(WHITEOUT_PREFIX + WHITEOUT_PREFIX):
        # aufs bookkeeping (.wh..wh.plnk and friends), not a deletion
        return WhiteoutEntry("meta", relpath)
    name = base[len(WHITEOUT_PREFIX):]
    return WhiteoutEntry("file-whiteout", parent + "/" + name if parent else name)


def normalize_member_name(name, layer="?"):
    """Turn a tar member name into a relative path, rejecting escapes."""
    if name.startswith("/"):
        raise RejectedEntryError(layer, name, "absolute path")
    parts = []
    for comp in name.split("/"):
        if comp in ("", "."):
            continue
        if comp == "..":
            raise RejectedEntryError(layer, name, "'..' traversal")
        parts.append(comp)
    return "/".join(parts)


class _Layer:
    def __init__(self, source, label):
        self.label = label
        self._tmp = None
        if isinstance(source, (bytes, bytearray)):
            fileobj = tempfile.TemporaryFile()
            fileobj.write(source)
            fileobj.seek(0)
            self._tmp = fileobj
        elif isinstance(source, (str, os.PathLike)):
            self.label = os.path.basename(os.fspath(source)) or label
            try:
                fileobj = open(source, "rb")
            except OSError as exc:
                raise FormatError("layer %s: %s" % (self.label, exc)) from exc
            self._tmp = fileobj
        else:
            fileobj = source
            if not fileobj.seekable():
                spool = tempfile.TemporaryFile()
                shutil.copyfileobj(fileobj, spool)
                spool.seek(0)
                fileobj = self._tmp = spool
        magic = fileobj.read(4)
        fileobj.seek(-len(magic), os.SEEK_CUR)
        if magic.startswith(ZSTD_MAGIC):
            raise FormatError("layer %s: zstd compression is not supported" % self.label)
        mode = "r:gz" if magic.startswith(GZIP_MAGIC) else "r:"
        try:
            self.tar = tarfile.open(fileobj=fileobj, mode=mode)
            self.members = self.tar.getmembers()
        except (tarfile.TarError, OSError, EOFError) as exc:
            self.close()
            raise FormatError("layer %s: unreadable tar: %s" % (self.label, exc)) from exc

    def close(self):
        if self._tmp is not None:
            self._tmp.close()
            self._tmp = None


def _remove(path):
    try:
        st = os.lstat(path)
    except FileNotFoundError:
        return
    if stat.S_ISDIR(st.st_mode):
        _make_removable(path)
        shutil.rmtree(path)
    else:
        os.unlink(path)


def _make_removable(top):
    os.chmod(top, stat.S_IMODE(os.lstat(top).st_mode) | 0o700)
    for dirpath, dirnames, _ in os.walk(top):
        for d in dirnames:
            p = os.path.join(dirpath, d)
            st = os.lstat(p)
            if stat.S_ISDIR(st.st_mode):
                os.chmod(p, stat.S_IMODE(st.st_mode) | 0o700)


def _clear_dir(path):
    for name in os.listdir(path):
        _remove(os.path.join(path, name))


def _file_mode(mode, policy):
    mode = stat.S_IMODE(mode)
    if policy.strip_setuid:
        mode &= ~(stat.S_ISUID | stat.S_ISGID)
    return mode


class _Extractor:
    def __init__(self, dest, policy):
        self.dest = os.path.abspath(dest)
        self.policy = policy

    def host(self, relpath):
        return os.path.join(self.dest, relpath) if relpath else self.dest

    def check_parents(self, layer, relpath, create):
        """Verify every parent of relpath is a real directory inside dest.

        Missing parents are created when ``create`` is set.  Returns False
        when a parent is missing and not created.
        """
        parts = relpath.split("/")[:-1]
        cur = self.dest
        for comp in parts:
            cur = os.path.join(cur, comp)
            try:
                st = os.lstat(cur)
            except FileNotFoundError:
                if not create:
                    return False
                os.mkdir(cur, 0o755)
                continue
            if stat.S_ISLNK(st.st_mode):
                raise RejectedEntryError(layer, relpath, "parent %r is a symlink" % comp)
            if not stat.S_ISDIR(st.st_mode):
                raise RejectedEntryError(layer, relpath, "parent %r is not a directory" % comp)
        return True

    def apply_whiteout(self, layer, wh):
        if wh.kind == "meta":
            return
        target = wh.target
        if wh.kind == "opaque-dir":
            if target and not self.check_parents(layer, target + "/x", create=False):
                return
            path = self.host(target)
            try:
                st = os.lstat(path)
            except FileNotFoundError:
                return
            if stat.S_ISDIR(st.st_mode):
                _clear_dir(path)
            return
        if not self.check_parents(layer, target, create=False):
            return
        _remove(self.host(target))

    def extract_layer(self, layer):
        entries = []
        whiteouts = []
        for member in layer.members:
            relpath = normalize_member_name(member.name, layer.label)
            if not relpath:
                continue
            if relpath.count("/") + 1 > self.policy.max_path_depth:
                raise RejectedEntryError(layer.label, member.name, "path too deep")
            wh = parse_whiteout(relpath)
            if wh is not None:
                whiteouts.append(wh)
            else:
                entries.append((relpath, member))

        for wh in whiteouts:
            self.apply_whiteout(layer.label, wh)

        dir_times = []
        layer_files = set()
        for relpath, member in entries:
            self.check_parents(layer.label, relpath, create=True)
            path = self.host(relpath)
            if member.isdir():
                if not (os.path.isdir(path) and not os.path.islink(path)):
                    _remove(path)
                    os.mkdir(path, 0o700)
                os.chmod(path, _file_mode(member.mode, self.policy) | 0o700)
                dir_times.append((path, member.mtime))
            elif member.isreg():
                _remove(path)
                fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL | os.O_NOFOLLOW, 0o600)
                with os.fdopen(fd, "wb") as out:
                    src = layer.tar.extractfile(member)
                    shutil.copyfileobj(src, out)
                os.chmod(path, _file_mode(member.mode, self.policy))
                os.utime(path, (member.mtime, member.mtime))
                layer_files.add(relpath)
            elif member.issym():
                _remove(path)
                os.symlink(member.linkname, path)
                os.utime(path, (member.mtime, member.mtime), follow_symlinks=False)
            elif member.islnk():
                target = normalize_member_name(member.linkname, layer.label)
                if target not in layer_files:
                    raise RejectedEntryError(
                        layer.label, member.name, "hardlink target %r outside the archive" % member.linkname
                    )
                _remove(path)
                os.link(self.host(target), path)
                layer_files.add(relpath)
            elif member.ischr() or member.isblk() or member.isfifo():
                log.warning("layer %s: skipping device/fifo %s", layer.label, relpath)
            else:
                log.warning("layer %s: skipping unsupported entry %s (type %r)", layer.label, relpath, member.type)

        for path, mtime in reversed(dir_times):
            if os.path.isdir(path) and not os.path.islink(path):
                os.utime(path, (mtime, mtime))


def flatten(layers, dest, policy=None):
    """Extract ``layers`` (base first) over ``dest``.

    Each layer may be a path, a bytes object or a binary file object; gzip
    compression is detected from the magic bytes.
    """
    policy = policy or DEFAULT_POLICY
    os.makedirs(dest, exist_ok=True)
    extractor = _Extractor(dest, policy)
    for index, source in enumerate(layers):
        layer = _Layer(source, "#%d" % index)
        try:
            extractor.extract_layer(layer)
        except tarfile.TarError as exc:
            raise FormatError("layer %s: %s" % (layer.label, exc)) from exc
        finally:
            layer.close()


def adjust_permissions(rootfs):
    """Give the owner access to every file and directory below ``rootfs``.

    Directories become ``u+rwx``, regular files ``u+rw``; all other bits,
    including the execute bits, are left alone.  Symlinks are not touched.
    """

    def fix(path, st, extra):
        mode = stat.S_IMODE(st.st_mode)
        if mode | extra != mode:
            try:
                os.chmod(path, mode | extra)
            except OSError as exc:
                raise PermissionError(exc.errno, "cannot adjust permissions: %s" % exc.strerror, path) from exc

    stack = [rootfs]
    fix(rootfs, os.lstat(rootfs), 0o700)
    while stack:
        top = stack.pop()
        with os.scandir(top) as it:
            for entry in it:
                st = entry.stat(follow_symlinks=False)
                if stat.S_ISDIR(st.st_mode):
                    fix(entry.path, st, 0o700)
                    stack.append(entry.path)
                elif stat.S_ISREG(st.st_mode):
                    fix(entry.path, st, 0o600)


def export_tree(rootfs, out):
    """Write ``rootfs`` as an uncompressed tar stream to the file object ``out``.

    Named pipes, sockets and device nodes are skipped with a warning.
    """
    rootfs = os.path.abspath(rootfs)
    with tarfile.open(fileobj=out, mode="w|", format=tarfile.PAX_FORMAT) as tar:
        for dirpath, dirnames, filenames in os.walk(rootfs):
            dirnames.sort()
            for name in sorted(dirnames) + sorted(filenames):
                path = os.path.join(dirpath, name)
                arcname = os.path.relpath(path, rootfs)
                st = os.lstat(path)
                if not (stat.S_ISREG(st.st_mode) or stat.S_ISDIR(st.st_mode) or stat.S_ISLNK(st.st_mode)):
                    log.warning("export: skipping special file %s", arcname)
                    continue
                info = tar.gettarinfo(path, arcname)
                info.uid = info.gid = 0
                info.uname = info.gname = "root"
                if info.isreg():
                    with open(path, "rb") as fh:
                        tar.addfile(info, fh)
                else:
                    tar.addfile(info)


def import_tree(stream, dest, policy=None):
    """Populate ``dest`` from a tar stream produced by :func:`export_tree`."""
    flatten([stream], dest, policy)
    adjust_permissions(dest)
