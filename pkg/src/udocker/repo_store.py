"""Local repository of layers, images and containers.

Everything lives below one user-writable directory (``$UDOCKER_DIR``, by
default ``$HOME/.udocker``)::

    <root>/layers/sha256:<hex>                  content-addressed layer blobs
    <root>/repos/<registry>/<repository>/<tag>/ manifest.json config.json layers.list
    <root>/containers/<uuid>/                   ROOT/ container.json names
    <root>/bin  <root>/lib                      engine support tools
"""

import contextlib
import dataclasses
import fcntl
import hashlib
import json
import logging
import os
import re
import shutil
import tempfile
import time
import uuid

from . import layer_assembler
from .errors import (
    ConflictError,
    FormatError,
    ImageNotFoundError,
    IncompleteImageError,
    IntegrityError,
    LayoutError,
    NotFoundError,
    ProtectedError,
    UsageError,
)

log = logging.getLogger(__name__)

SUBDIRS = ("bin", "lib", "layers", "repos", "containers")
DEFAULT_REGISTRY = "docker.io"
DEFAULT_TAG = "latest"
DEFAULT_EXEC_MODE = "P1"
PROTECT_MARKER = "PROTECT"

DIGEST_RE = re.compile(r"^sha256:[0-9a-f]{64}$")
UUID_RE = re.compile(r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")
ALIAS_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")
_REPO_COMPONENT_RE = re.compile(r"^[a-z0-9]+(?:(?:[._]|__|-+)[a-z0-9]+)*$")
_TAG_RE = re.compile(r"^[\w][\w.-]{0,127}$")


def default_root():
    env = os.environ.get("UDOCKER_DIR")
    if env:
        return os.path.abspath(env)
    return os.path.join(os.path.expanduser("~"), ".udocker")


@dataclasses.dataclass(frozen=True)
class ImageRef:
    registry: str
    repository: str
    tag: str = DEFAULT_TAG

    @classmethod
    def parse(cls, text):
        """Parse ``[registry/]repository[:tag|@digest]``."""
        if not text or text != text.strip():
            raise UsageError("invalid image reference: %r" % text)
        digest = None
        if "@" in text:
            text, digest = text.split("@", 1)
            if not DIGEST_RE.match(digest):
                raise UsageError("invalid image digest: %r" % digest)
        parts = text.split("/")
        registry = DEFAULT_REGISTRY
        if len(parts) > 1 and ("." in parts[0] or ":" in parts[0] or parts[0] == "localhost"):
            registry = parts.pop(0)
        tag = DEFAULT_TAG
        last = parts[-1]
        if ":" in last:
            last, tag = last.rsplit(":", 1)
            parts[-1] = last
        if digest:
            tag = digest
        elif not _TAG_RE.match(tag):
            raise UsageError("invalid image tag: %r" % tag)
        if registry == DEFAULT_REGISTRY and len(parts) == 1:
            parts.insert(0, "library")
        for comp in parts:
            if not _REPO_COMPONENT_RE.match(comp):
                raise UsageError("invalid repository name component %r in %r" % (comp, text))
        return cls(registry, "/".join(parts), tag)

    @property
    def is_digest(self):
        return bool(DIGEST_RE.match(self.tag))

    def __str__(self):
        sep = "@" if self.is_digest else ":"
        return "%s/%s%s%s" % (self.registry, self.repository, sep, self.tag)


@dataclasses.dataclass(frozen=True)
class LayerDescriptor:
    digest: str
    size: int = -1
    media_type: str = ""

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(obj["digest"], int(obj.get("size", -1)), obj.get("mediaType", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError("invalid descriptor: %r" % (obj,)) from exc


@dataclasses.dataclass
class ContainerRecord:
    id: str
    names: set
    image: ImageRef | None
    rootfs: str
    exec_mode: str = DEFAULT_EXEC_MODE
    protected: bool = False
    created: float = 0.0


@dataclasses.dataclass(frozen=True)
class RepoLayout:
    root: str
    subdirs: tuple = SUBDIRS

    def path(self, sub, *rest):
        return os.path.join(self.root, sub, *rest)

    @property
    def bin(self):
        return self.path("bin")

    @property
    def lib(self):
        return self.path("lib")

    @property
    def layers(self):
        return self.path("layers")

    @property
    def repos(self):
        return self.path("repos")

    @property
    def containers(self):
        return self.path("containers")


def init_repo(root=None):
    """Create (idempotently) the repository directory tree."""
    root = os.path.abspath(root or default_root())
    if os.path.exists(root) and not os.path.isdir(root):
        raise LayoutError("repository root %s is not a directory" % root)
    parent = os.path.dirname(root)
    if not os.path.isdir(parent):
        raise LayoutError("parent directory %s does not exist" % parent)
    try:
        os.makedirs(root, mode=0o755, exist_ok=True)
        for sub in SUBDIRS:
            path = os.path.join(root, sub)
            if os.path.exists(path) and not os.path.isdir(path):
                raise LayoutError("%s exists and is not a directory" % path)
            os.makedirs(path, mode=0o755, exist_ok=True)
    except PermissionError as exc:
        raise PermissionError(exc.errno, "cannot initialize repository: %s" % exc.strerror, exc.filename) from exc
    for sub in SUBDIRS:
        if not os.access(os.path.join(root, sub), os.W_OK | os.X_OK):
            raise PermissionError(13, "repository directory is not writable", os.path.join(root, sub))
    return RepoLayout(root)


@contextlib.contextmanager
def _flock(path, directory=False):
    flags = os.O_RDONLY if directory else os.O_RDWR | os.O_CREAT
    fd = os.open(path, flags | os.O_CLOEXEC, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        yield
    finally:
        os.close(fd)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _chunks(blob):
    if isinstance(blob, (bytes, bytearray, memoryview)):
        yield bytes(blob)
    elif hasattr(blob, "read"):
        for chunk in iter(lambda: blob.read(1 << 20), b""):
            yield chunk
    else:
        yield from blob


def is_uuid(text):
    return bool(UUID_RE.match(text))


class LocalRepository:
    """Operations on an initialized repository."""

    def __init__(self, root=None):
        self.layout = init_repo(root)

    @property
    def root(self):
        return self.layout.root

    # -- layers ---------------------------------------------------------

    def layer_path(self, digest):
        if not DIGEST_RE.match(digest or ""):
            raise FormatError("malformed digest: %r" % digest)
        return self.layout.path("layers", digest)

    def has_layer(self, digest):
        return os.path.isfile(self.layer_path(digest))

    def list_layers(self):
        return sorted(n for n in os.listdir(self.layout.layers) if DIGEST_RE.match(n))

    def store_layer(self, desc, blob):
        """Store a blob under its digest, verifying content on the way in."""
        final = self.layer_path(desc.digest)
        lock = self.layout.path("layers", ".%s.lock" % desc.digest)
        with _flock(lock):
            if os.path.isfile(final):
                return final
            fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=self.layout.layers)
            try:
                h = hashlib.sha256()
                size = 0
                with os.fdopen(fd, "wb") as out:
                    for chunk in _chunks(blob):
                        h.update(chunk)
                        size += len(chunk)
                        out.write(chunk)
                actual = "sha256:" + h.hexdigest()
                if actual != desc.digest:
                    raise IntegrityError("digest mismatch for %s: content hashes to %s" % (desc.digest, actual))
                if desc.size >= 0 and size != desc.size:
                    raise IntegrityError("size mismatch for %s: expected %d, got %d" % (desc.digest, desc.size, size))
                os.chmod(tmp, 0o644)
                os.rename(tmp, final)
            except BaseException:
                with contextlib.suppress(FileNotFoundError):
                    os.unlink(tmp)
                raise
        return final

    def verify_layer(self, digest):
        return sha256_file(self.layer_path(digest)) == digest

    # -- images ---------------------------------------------------------

    def image_dir(self, ref):
        return self.layout.path("repos", ref.registry, *ref.repository.split("/"), ref.tag)

    def register_image(self, ref, manifest, config, layer_digests):
        """Record an image whose layers are all present; atomic per image."""
        for digest in layer_digests:
            if not self.has_layer(digest):
                raise IncompleteImageError("cannot register %s: layer %s missing" % (ref, digest))
        final = self.image_dir(ref)
        parent = os.path.dirname(final)
        os.makedirs(parent, exist_ok=True)
        tmp = tempfile.mkdtemp(prefix=".tmp-", dir=parent)
        try:
            with open(os.path.join(tmp, "manifest.json"), "wb") as fh:
                fh.write(manifest)
            with open(os.path.join(tmp, "config.json"), "wb") as fh:
                fh.write(config)
            with open(os.path.join(tmp, "layers.list"), "w") as fh:
                fh.writelines(d + "\n" for d in layer_digests)
            os.chmod(tmp, 0o755)
            if os.path.isdir(final):
                old = final + ".old-%d" % os.getpid()
                os.rename(final, old)
                os.rename(tmp, final)
                shutil.rmtree(old, ignore_errors=True)
            else:
                os.rename(tmp, final)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return final

    def image_layer_digests(self, ref):
        listing = os.path.join(self.image_dir(ref), "layers.list")
        try:
            with open(listing) as fh:
                return [line.strip() for line in fh if line.strip()]
        except FileNotFoundError:
            raise ImageNotFoundError("image not found: %s" % ref) from None

    def image_layers(self, ref):
        paths = []
        for digest in self.image_layer_digests(ref):
            path = self.layer_path(digest)
            if not os.path.isfile(path):
                raise IncompleteImageError("image %s is missing layer %s" % (ref, digest))
            paths.append(path)
        return paths

    def image_config(self, ref):
        try:
            with open(os.path.join(self.image_dir(ref), "config.json"), "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            raise ImageNotFoundError("image not found: %s" % ref) from None

    def has_image(self, ref):
        try:
            self.image_layers(ref)
        except NotFoundError:
            return False
        return True

    def list_images(self):
        images = []
        top = self.layout.repos
        for dirpath, dirnames, filenames in os.walk(top):
            dirnames[:] = sorted(d for d in dirnames if not d.startswith("."))
            if "layers.list" not in filenames:
                continue
            parts = os.path.relpath(dirpath, top).split(os.sep)
            if len(parts) < 3:
                continue
            ref = ImageRef(parts[0], "/".join(parts[1:-1]), parts[-1])
            if self.has_image(ref):
                images.append(ref)
        return images

    def remove_image(self, ref):
        path = self.image_dir(ref)
        if not os.path.isfile(os.path.join(path, "layers.list")):
            raise ImageNotFoundError("image not found: %s" % ref)
        if os.path.exists(os.path.join(path, PROTECT_MARKER)):
            raise ProtectedError("image %s is protected" % ref)
        digests = set(self.image_layer_digests(ref))
        shutil.rmtree(path)
        in_use = set()
        for other in self.list_images():
            in_use.update(self.image_layer_digests(other))
        for digest in digests - in_use:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(self.layer_path(digest))

    def protect_image(self, ref, protected=True):
        marker = os.path.join(self.image_dir(ref), PROTECT_MARKER)
        if not os.path.isdir(self.image_dir(ref)):
            raise ImageNotFoundError("image not found: %s" % ref)
        if protected:
            open(marker, "w").close()
        else:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(marker)

    # -- containers -----------------------------------------------------

    def container_dir(self, cid):
        return self.layout.path("containers", cid)

    def rootfs(self, cid):
        return os.path.join(self.container_dir(cid), "ROOT")

    def _new_container_dir(self):
        while True:
            cid = str(uuid.uuid4())
            try:
                os.mkdir(self.container_dir(cid), 0o755)
                return cid
            except FileExistsError:
                continue

    def _write_record(self, cid, image, image_config, exec_mode=DEFAULT_EXEC_MODE):
        doc = {
            "id": cid,
            "image": str(image) if image else None,
            "exec_mode": exec_mode,
            "created": time.time(),
            "image_config": image_config,
        }
        tmp = os.path.join(self.container_dir(cid), ".container.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        os.rename(tmp, os.path.join(self.container_dir(cid), "container.json"))

    def _read_record(self, cid):
        try:
            with open(os.path.join(self.container_dir(cid), "container.json")) as fh:
                return json.load(fh)
        except FileNotFoundError:
            raise NotFoundError("container not found: %s" % cid) from None

    def create_container(self, ref, name=None):
        """Flatten the layers of a local image into a new container."""
        layers = self.image_layers(ref)
        config_blob = self.image_config(ref)
        try:
            image_config = json.loads(config_blob or b"{}")
        except ValueError as exc:
            raise FormatError("invalid image config for %s" % ref) from exc
        cid = self._new_container_dir()
        try:
            rootfs = self.rootfs(cid)
            os.mkdir(rootfs, 0o755)
            layer_assembler.flatten(layers, rootfs)
            layer_assembler.adjust_permissions(rootfs)
            open(os.path.join(self.container_dir(cid), "names"), "w").close()
            self._write_record(cid, ref, image_config)
            if name:
                self.set_name(cid, name)
        except BaseException:
            self._rmtree(self.container_dir(cid))
            raise
        return self.get_container(cid)

    def import_container(self, stream, name=None):
        cid = self._new_container_dir()
        try:
            rootfs = self.rootfs(cid)
            os.mkdir(rootfs, 0o755)
            layer_assembler.import_tree(stream, rootfs)
            open(os.path.join(self.container_dir(cid), "names"), "w").close()
            self._write_record(cid, None, {})
            if name:
                self.set_name(cid, name)
        except BaseException:
            self._rmtree(self.container_dir(cid))
            raise
        return self.get_container(cid)

    def export_container(self, name_or_id, out):
        cid = self.resolve(name_or_id)
        layer_assembler.export_tree(self.rootfs(cid), out)

    def _names(self, cid):
        try:
            with open(os.path.join(self.container_dir(cid), "names")) as fh:
                return {line.strip() for line in fh if line.strip()}
        except FileNotFoundError:
            return set()

    def _container_ids(self):
        top = self.layout.containers
        return sorted(
            n for n in os.listdir(top)
            if is_uuid(n) and os.path.isfile(os.path.join(top, n, "container.json"))
        )

    def resolve(self, name_or_id):
        """Map an alias or container id to the container id."""
        if is_uuid(name_or_id):
            if os.path.isfile(os.path.join(self.container_dir(name_or_id), "container.json")):
                return name_or_id
            raise NotFoundError("container not found: %s" % name_or_id)
        for cid in self._container_ids():
            if name_or_id in self._names(cid):
                return cid
        raise NotFoundError("container not found: %s" % name_or_id)

    def set_name(self, cid, alias):
        if not ALIAS_RE.match(alias or "") or is_uuid(alias):
            raise UsageError("invalid container name: %r" % alias)
        with _flock(self.layout.containers, directory=True):
            cid = self.resolve(cid)
            for other in self._container_ids():
                if alias in self._names(other):
                    if other == cid:
                        return
                    raise ConflictError("name %r already used by container %s" % (alias, other))
            with open(os.path.join(self.container_dir(cid), "names"), "a") as fh:
                fh.write(alias + "\n")

    def remove_name(self, alias):
        with _flock(self.layout.containers, directory=True):
            cid = self.resolve(alias)
            names = self._names(cid) - {alias}
            with open(os.path.join(self.container_dir(cid), "names"), "w") as fh:
                fh.writelines(n + "\n" for n in sorted(names))

    def get_container(self, name_or_id):
        cid = self.resolve(name_or_id)
        doc = self._read_record(cid)
        image = ImageRef.parse(doc["image"]) if doc.get("image") else None
        return ContainerRecord(
            id=cid,
            names=self._names(cid),
            image=image,
            rootfs=self.rootfs(cid),
            exec_mode=doc.get("exec_mode", DEFAULT_EXEC_MODE),
            protected=os.path.exists(os.path.join(self.container_dir(cid), PROTECT_MARKER)),
            created=doc.get("created", 0.0),
        )

    def container_image_config(self, name_or_id):
        return self._read_record(self.resolve(name_or_id)).get("image_config") or {}

    def list_containers(self):
        return [self.get_container(cid) for cid in self._container_ids()]

    def set_exec_mode(self, name_or_id, mode):
        cid = self.resolve(name_or_id)
        doc = self._read_record(cid)
        doc["exec_mode"] = mode
        tmp = os.path.join(self.container_dir(cid), ".container.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        os.rename(tmp, os.path.join(self.container_dir(cid), "container.json"))

    def protect_container(self, name_or_id, protected=True):
        marker = os.path.join(self.container_dir(self.resolve(name_or_id)), PROTECT_MARKER)
        if protected:
            open(marker, "w").close()
        else:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(marker)

    def remove_container(self, name_or_id):
        rec = self.get_container(name_or_id)
        if rec.protected:
            raise ProtectedError("container %s is protected" % rec.id)
        self._rmtree(self.container_dir(rec.id))

    @staticmethod
    def _rmtree(path):
        if not os.path.lexists(path):
            return
        layer_assembler.adjust_permissions(path)
        shutil.rmtree(path)
