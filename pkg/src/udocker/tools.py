"""Engine support tools: building and installing the preload interposer.

The tools live in ``<repo>/lib`` (shared objects) and ``<repo>/bin``.  A
VERSION marker in ``<repo>/lib`` makes installation idempotent.  Tools can
come from three places: compiled from the C source shipped with the
package, a local tarball, or a tarball URL.  Tarballs are only accepted
with a matching SHA-256 checksum.
"""

import hashlib
import io
import logging
import os
import shutil
import subprocess
import tarfile
import tempfile
from importlib import resources

import requests

from . import __version__
from .errors import IntegrityError, UnsupportedError
from .repo_store import RepoLayout, default_root

log = logging.getLogger(__name__)

TOOLS_VERSION = __version__
INTERPOSER = "libudocker-fk.so"
MARKER = "VERSION"
TARBALL_PREFIX = "udocker-tools/"
TARBALL_ENV = "UDOCKER_TARBALL"
CFLAGS = ("-shared", "-fPIC", "-O2", "-Wall")


def interposer_source():
    return resources.files("udocker").joinpath("csrc", "fakechroot.c")


def build_interposer(out, cc=None):
    """Compile the interposer into ``out`` with the host C compiler."""
    cc = cc or os.environ.get("CC") or "cc"
    if shutil.which(cc) is None:
        raise UnsupportedError("no C compiler (%s) found to build the interposer; install from a tarball" % cc)
    with resources.as_file(interposer_source()) as src:
        tmp = out + ".tmp"
        cmd = [cc, *CFLAGS, "-o", tmp, str(src), "-ldl"]
        proc = subprocess.run(cmd, capture_output=True, text=True, check=False)
        if proc.returncode != 0:
            raise UnsupportedError("interposer build failed:\n%s" % proc.stderr.strip())
    os.replace(tmp, out)
    return out


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_tarball(out, cc=None):
    """Write a tools tarball plus ``<out>.sha256``; returns the checksum."""
    with tempfile.TemporaryDirectory() as tmp:
        lib = build_interposer(os.path.join(tmp, INTERPOSER), cc)
        with tarfile.open(out, "w:gz") as tar:
            tar.add(lib, TARBALL_PREFIX + "lib/" + INTERPOSER)
            data = (TOOLS_VERSION + "\n").encode()
            info = tarfile.TarInfo(TARBALL_PREFIX + MARKER)
            info.size = len(data)
            tar.addfile(info, io.BytesIO(data))
    digest = sha256_file(out)
    with open(out + ".sha256", "w") as fh:
        fh.write("%s  %s\n" % (digest, os.path.basename(out)))
    return digest


def installed_version(layout):
    try:
        with open(os.path.join(layout.lib, MARKER)) as fh:
            return fh.read().strip()
    except OSError:
        return None


def is_installed(layout):
    return installed_version(layout) == TOOLS_VERSION and os.path.isfile(os.path.join(layout.lib, INTERPOSER))


def interposer_path(layout):
    return os.path.join(layout.lib, INTERPOSER)


def _expected_checksum(source, sha256):
    if sha256:
        return sha256.lower().split(":")[-1]
    side = source + ".sha256"
    if source.startswith(("http://", "https://")):
        resp = requests.get(side, timeout=60)
        if resp.status_code != 200:
            raise IntegrityError("no checksum available for %s" % source)
        text = resp.text
    else:
        try:
            with open(side) as fh:
                text = fh.read()
        except OSError:
            raise IntegrityError("no checksum given and %s missing" % side) from None
    return text.split()[0].lower()


def _fetch(source, dest):
    if not source.startswith(("http://", "https://")):
        shutil.copyfile(source, dest)
        return
    with requests.get(source, stream=True, timeout=60) as resp:
        if resp.status_code != 200:
            raise UnsupportedError("tools download failed with HTTP %d" % resp.status_code)
        with open(dest, "wb") as fh:
            for chunk in resp.iter_content(1 << 20):
                fh.write(chunk)


def _unpack(tarball, staging):
    wanted = {TARBALL_PREFIX + "lib/" + INTERPOSER: os.path.join(staging, INTERPOSER)}
    found = set()
    try:
        with tarfile.open(tarball) as tar:
            for member in tar.getmembers():
                target = wanted.get(member.name)
                if target is None or not member.isfile():
                    continue
                with tar.extractfile(member) as src, open(target, "wb") as dst:
                    shutil.copyfileobj(src, dst)
                os.chmod(target, 0o755)
                found.add(member.name)
    except tarfile.TarError as exc:
        raise IntegrityError("unreadable tools tarball: %s" % exc) from exc
    missing = set(wanted) - found
    if missing:
        raise IntegrityError("tools tarball lacks %s" % ", ".join(sorted(missing)))


def install(root=None, source=None, sha256=None, force=False, cc=None):
    """Place the engine tools into the repository; returns True if work was done."""
    layout = RepoLayout(root or default_root())
    os.makedirs(layout.lib, exist_ok=True)
    os.makedirs(layout.bin, exist_ok=True)
    if not force and is_installed(layout):
        log.info("tools %s already installed", TOOLS_VERSION)
        return False
    source = source or os.environ.get(TARBALL_ENV)
    with tempfile.TemporaryDirectory(dir=layout.lib) as staging:
        built = os.path.join(staging, INTERPOSER)
        if source:
            expected = _expected_checksum(source, sha256)
            tarball = os.path.join(staging, "tools.tar.gz")
            _fetch(source, tarball)
            actual = sha256_file(tarball)
            if actual != expected:
                raise IntegrityError("tools tarball checksum mismatch: expected %s, got %s" % (expected, actual))
            _unpack(tarball, staging)
        else:
            build_interposer(built, cc)
        os.replace(built, interposer_path(layout))
    marker = os.path.join(layout.lib, MARKER)
    with open(marker + ".tmp", "w") as fh:
        fh.write(TOOLS_VERSION + "\n")
    os.replace(marker + ".tmp", marker)
    log.info("installed tools %s into %s", TOOLS_VERSION, layout.lib)
    return True


def ensure_installed(root=None):
    layout = RepoLayout(root or default_root())
    if not is_installed(layout):
        install(root)
    return interposer_path(layout)
