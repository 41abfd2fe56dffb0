import hashlib
import io
import json
import os
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

import helpers
from udocker.errors import (
    ConflictError,
    ImageNotFoundError,
    IncompleteImageError,
    IntegrityError,
    LayoutError,
    NotFoundError,
    ProtectedError,
    UsageError,
)
from udocker.repo_store import (
    SUBDIRS,
    ImageRef,
    LayerDescriptor,
    LocalRepository,
    default_root,
    init_repo,
    is_uuid,
)

# sha256("hello") as printed by `printf hello | sha256sum`
HELLO_DIGEST = "sha256:2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"


def test_init_creates_layout(tmp_path):
    layout = init_repo(str(tmp_path / "u"))
    assert sorted(os.listdir(layout.root)) == sorted(SUBDIRS) == ["bin", "containers", "layers", "lib", "repos"]
    for sub in SUBDIRS:
        assert os.access(os.path.join(layout.root, sub), os.W_OK)


def test_init_idempotent(tmp_path):
    a = init_repo(str(tmp_path / "u"))
    (tmp_path / "u" / "layers" / "keep").write_text("x")
    b = init_repo(str(tmp_path / "u"))
    assert a == b
    assert (tmp_path / "u" / "layers" / "keep").exists()


def test_root_is_file(tmp_path):
    (tmp_path / "f").write_text("")
    with pytest.raises(LayoutError):
        init_repo(str(tmp_path / "f"))


def test_udocker_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("UDOCKER_DIR", str(tmp_path / "u"))
    assert default_root() == str(tmp_path / "u")
    assert init_repo().root == str(tmp_path / "u")
    monkeypatch.delenv("UDOCKER_DIR")
    monkeypatch.setenv("HOME", str(tmp_path))
    assert default_root() == str(tmp_path / ".udocker")


@pytest.mark.parametrize("text,expected", [
    ("docker.io/repo_name/container_name", ImageRef("docker.io", "repo_name/container_name", "latest")),
    ("ubuntu", ImageRef("docker.io", "library/ubuntu", "latest")),
    ("ubuntu:22.04", ImageRef("docker.io", "library/ubuntu", "22.04")),
    ("localhost:5000/a/b:t", ImageRef("localhost:5000", "a/b", "t")),
    ("quay.io/x/y", ImageRef("quay.io", "x/y", "latest")),
])
def test_imageref_parse(text, expected):
    assert ImageRef.parse(text) == expected


@pytest.mark.parametrize("bad", ["", "UPPER/case", "a//b", "x:", " ubuntu"])
def test_imageref_invalid(bad):
    with pytest.raises(UsageError):
        ImageRef.parse(bad)


component = st.from_regex(r"[a-z0-9]{1,8}(-[a-z0-9]{1,4})?", fullmatch=True)


@given(st.sampled_from(["docker.io", "quay.io", "localhost:5000", "reg.example.org"]),
       st.lists(component, min_size=1, max_size=3),
       st.from_regex(r"[A-Za-z0-9_][A-Za-z0-9_.-]{0,20}", fullmatch=True))
def test_imageref_round_trip(registry, parts, tag):
    if registry == "docker.io" and len(parts) == 1:
        parts = ["library"] + parts
    ref = ImageRef(registry, "/".join(parts), tag)
    assert ImageRef.parse(str(ref)) == ref


def test_store_layer_hello(repo):
    assert hashlib.sha256(b"hello").hexdigest() == HELLO_DIGEST[7:]
    path = repo.store_layer(LayerDescriptor(HELLO_DIGEST, 5), b"hello")
    assert os.path.getsize(path) == 5
    assert os.path.basename(path) == HELLO_DIGEST
    again = repo.store_layer(LayerDescriptor(HELLO_DIGEST, 5), io.BytesIO(b"hello"))
    assert again == path
    assert repo.list_layers() == [HELLO_DIGEST]
    assert repo.verify_layer(HELLO_DIGEST)


def test_store_layer_mismatch(repo):
    before = repo.list_layers()
    with pytest.raises(IntegrityError):
        repo.store_layer(LayerDescriptor(HELLO_DIGEST, 5), b"hellp")
    assert repo.list_layers() == before
    assert not [n for n in os.listdir(repo.layout.layers) if n.startswith(".tmp-")]


def test_store_layer_size_mismatch(repo):
    with pytest.raises(IntegrityError):
        repo.store_layer(LayerDescriptor(HELLO_DIGEST, 6), b"hello")


def test_concurrent_store(repo):
    blob = os.urandom(1 << 20)
    desc = LayerDescriptor(helpers.digest(blob), len(blob))
    errors = []

    def worker():
        try:
            repo.store_layer(desc, [blob[i:i + 4096] for i in range(0, len(blob), 4096)])
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert repo.list_layers() == [desc.digest]
    assert repo.verify_layer(desc.digest)


def _register(repo, name, layers, config=None):
    ref = ImageRef.parse(name)
    digests = []
    for blob in layers:
        d = helpers.digest(blob)
        repo.store_layer(LayerDescriptor(d, len(blob)), blob)
        digests.append(d)
    cfg = json.dumps(config or {"config": {"Cmd": ["/bin/sh"]}}).encode()
    repo.register_image(ref, b"{}", cfg, digests)
    return ref


def test_create_container_union(repo, tmp_path):
    l1 = helpers.make_layer([("etc", "d", None), ("etc/a", "f", "A"), ("etc/gone", "f", "x")])
    l2 = helpers.make_layer([("etc/.wh.gone", "f", ""), ("etc/b", "f", "B")])
    ref = _register(repo, "test/two:1", [l1, l2])
    rec = repo.create_container(ref)
    assert is_uuid(rec.id)
    assert rec.rootfs == os.path.join(repo.container_dir(rec.id), "ROOT")
    assert rec.exec_mode == "P1"
    assert sorted(os.listdir(os.path.join(rec.rootfs, "etc"))) == ["a", "b"]
    assert os.path.isfile(os.path.join(repo.container_dir(rec.id), "container.json"))


def test_create_container_empty_image(repo):
    ref = _register(repo, "test/empty", [])
    rec = repo.create_container(ref)
    assert os.listdir(rec.rootfs) == []


def test_create_container_missing_layer(repo):
    layer = helpers.make_layer([("a", "f", "x")])
    ref = _register(repo, "test/broken", [layer])
    os.unlink(repo.layer_path(helpers.digest(layer)))
    with pytest.raises(IncompleteImageError):
        repo.create_container(ref)
    assert repo.list_containers() == []
    assert not repo.has_image(ref)


def test_create_container_flatten_failure_cleans_up(repo):
    layer = helpers.make_layer([("../evil", "f", "x")])
    ref = _register(repo, "test/evil", [layer])
    with pytest.raises(Exception):
        repo.create_container(ref)
    assert os.listdir(repo.layout.containers) == []


def test_register_requires_layers(repo):
    with pytest.raises(IncompleteImageError):
        repo.register_image(ImageRef.parse("x/y"), b"{}", b"{}", [HELLO_DIGEST])
    assert repo.list_images() == []


def test_names(repo):
    ref = _register(repo, "test/n", [])
    a = repo.create_container(ref)
    b = repo.create_container(ref)
    repo.set_name(a.id, "my_container")
    assert repo.resolve("my_container") == a.id
    assert repo.resolve(a.id) == a.id
    with pytest.raises(ConflictError):
        repo.set_name(b.id, "my_container")
    repo.set_name(a.id, "my_container")  # same owner: no-op
    with pytest.raises(NotFoundError):
        repo.set_name("95c22b84-1868-332b-9bf0-2e056beafb00", "other")
    with pytest.raises(UsageError):
        repo.set_name(b.id, "95c22b84-1868-332b-9bf0-2e056beafb00")
    repo.remove_name("my_container")
    with pytest.raises(NotFoundError):
        repo.resolve("my_container")


def test_remove_container_isolated(repo):
    ref = _register(repo, "test/iso", [helpers.make_layer([("f", "f", "data")])])
    a = repo.create_container(ref, "a")
    b = repo.create_container(ref, "b")
    before = helpers.tree_hashes(b.rootfs)
    repo.remove_container("a")
    assert not os.path.exists(a.rootfs)
    assert helpers.tree_hashes(b.rootfs) == before
    assert os.stat(os.path.join(a.rootfs.rsplit("/", 2)[0])).st_uid == os.getuid()


def test_protection(repo):
    ref = _register(repo, "test/prot", [])
    rec = repo.create_container(ref, "p")
    repo.protect_container("p")
    with pytest.raises(ProtectedError):
        repo.remove_container("p")
    repo.protect_container("p", False)
    repo.remove_container("p")
    repo.protect_image(ref)
    with pytest.raises(ProtectedError):
        repo.remove_image(ref)
    repo.protect_image(ref, False)
    repo.remove_image(ref)
    with pytest.raises(ImageNotFoundError):
        repo.remove_image(ref)
    assert not os.path.exists(rec.rootfs)


def test_rmi_keeps_shared_layers(repo):
    shared = helpers.make_layer([("s", "f", "shared")])
    own = helpers.make_layer([("o", "f", "own")])
    a = _register(repo, "test/a", [shared, own])
    _register(repo, "test/b", [shared])
    repo.remove_image(a)
    assert repo.list_layers() == [helpers.digest(shared)]


def test_content_addressing_invariant(repo):
    for i in range(5):
        blob = os.urandom(100 + i)
        repo.store_layer(LayerDescriptor(helpers.digest(blob)), blob)
    for name in repo.list_layers():
        with open(repo.layer_path(name), "rb") as fh:
            assert helpers.digest(fh.read()) == name


def test_import_export_round_trip(repo, tmp_path):
    ref = _register(repo, "test/ie", [helpers.make_layer([("d", "d", None), ("d/f", "f", "x"), ("l", "l", "d/f")])])
    rec = repo.create_container(ref)
    buf = io.BytesIO()
    repo.export_container(rec.id, buf)
    buf.seek(0)
    copy = repo.import_container(buf, "copy")
    assert helpers.tree_hashes(copy.rootfs) == helpers.tree_hashes(rec.rootfs)
    assert repo.get_container("copy").image is None


def test_exec_mode_persisted(repo):
    rec = repo.create_container(_register(repo, "test/m", []), "m")
    repo.set_exec_mode("m", "F3")
    assert LocalRepository(repo.root).get_container(rec.id).exec_mode == "F3"
