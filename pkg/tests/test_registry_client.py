import json

import pytest

import helpers
from udocker.errors import (
    AuthError,
    ImageNotFoundError,
    IntegrityError,
    ProtocolError,
    UnsupportedManifestError,
)
from udocker.registry_client import (
    MT_DOCKER_LIST,
    MT_OCI_MANIFEST,
    AuthToken,
    RegistryClient,
    host_architecture,
    parse_challenge,
    pull_scope,
)
from udocker.repo_store import ImageRef


def _layers(n):
    return [helpers.make_layer([("f%d" % i, "f", "layer %d" % i)]) for i in range(n)]


def _ref(reg, name="test/img", tag="latest"):
    return ImageRef(reg.host, name, tag)


def _add_raw(reg, name, tag, doc):
    body = json.dumps(doc).encode()
    reg.manifests[(name, tag)] = body
    reg.manifests[(name, helpers.digest(body))] = body
    return helpers.digest(body)


def test_parse_challenge():
    scheme, params = parse_challenge('Bearer realm="https://auth.docker.io/token",service="registry.docker.io"')
    assert scheme == "Bearer"
    assert params == {"realm": "https://auth.docker.io/token", "service": "registry.docker.io"}


def test_token_scope():
    tok = AuthToken("t", pull_scope("library/ubuntu"))
    assert tok.applies_to("library/ubuntu")
    assert not tok.applies_to("library/debian")
    assert AuthToken("b", "", 0, "Basic").applies_to("anything")


def test_docker_hub_host(repo):
    client = RegistryClient(repo)
    assert client.base_url("docker.io") == "https://registry-1.docker.io"
    assert RegistryClient(repo, insecure=True).base_url("localhost:5000") == "http://localhost:5000"


def test_pull_anonymous(repo, registry):
    layers = _layers(3)
    registry.add_image("test/img", "latest", layers)
    result = RegistryClient(repo, insecure=True).pull(_ref(registry))
    assert (result.downloaded, result.skipped) == (3, 0)
    assert repo.image_layer_digests(_ref(registry)) == [helpers.digest(l) for l in layers]
    assert not any(r.startswith("/token") for r in registry.requests)


def test_pull_bearer(repo):
    with helpers.FakeRegistry(auth="bearer") as reg:
        reg.add_image("test/img", "latest", _layers(2))
        client = RegistryClient(repo, insecure=True, credentials=("alice", "secret"))
        token = client.authenticate(_ref(reg))
        assert token.token == "tok-123"
        assert token.scope == "repository:test/img:pull"
        assert client.pull(_ref(reg)).downloaded == 2
        tokreq = [r for r in reg.requests if r.startswith("/token")]
        assert tokreq and "scope=repository%3Atest%2Fimg%3Apull" in tokreq[0]


def test_bearer_bad_credentials(repo):
    with helpers.FakeRegistry(auth="bearer") as reg:
        reg.add_image("test/img", "latest", _layers(1))
        with pytest.raises(AuthError):
            RegistryClient(repo, insecure=True, credentials=("alice", "wrong")).pull(_ref(reg))
    assert repo.list_images() == []


def test_basic_auth(repo):
    with helpers.FakeRegistry(auth="basic") as reg:
        reg.add_image("test/img", "latest", _layers(1))
        with pytest.raises(AuthError):
            RegistryClient(repo, insecure=True).pull(_ref(reg))
        with pytest.raises(AuthError):
            RegistryClient(repo, insecure=True, credentials=("alice", "nope")).pull(_ref(reg))
        assert RegistryClient(repo, insecure=True, credentials=("alice", "secret")).pull(_ref(reg)).downloaded == 1


def test_401_without_challenge(repo):
    with helpers.FakeRegistry(auth="bearer") as reg:
        reg.challenge = False
        with pytest.raises(ProtocolError):
            RegistryClient(repo, insecure=True).pull(_ref(reg))


def test_second_pull_skips(repo, registry):
    registry.add_image("test/img", "latest", _layers(3))
    client = RegistryClient(repo, insecure=True)
    client.pull(_ref(registry))
    n = len([r for r in registry.requests if "/blobs/" in r])
    again = client.pull(_ref(registry))
    assert (again.downloaded, again.skipped) == (0, 3)
    # only the config blob is fetched again
    assert len([r for r in registry.requests if "/blobs/" in r]) == n + 1


def test_shared_layers_across_images(repo, registry):
    shared, own = _layers(2)
    registry.add_image("test/a", "latest", [shared])
    registry.add_image("test/b", "latest", [shared, own])
    client = RegistryClient(repo, insecure=True)
    client.pull(_ref(registry, "test/a"))
    res = client.pull(_ref(registry, "test/b"))
    assert (res.downloaded, res.skipped) == (1, 1)


def test_corrupt_layer(repo, registry):
    layers = _layers(3)
    registry.add_image("test/img", "latest", layers)
    registry.corrupt.add(helpers.digest(layers[1]))
    with pytest.raises(IntegrityError):
        RegistryClient(repo, insecure=True, parallel=1).pull(_ref(registry))
    stored = set(repo.list_layers())
    assert helpers.digest(layers[1]) not in stored
    assert stored <= {helpers.digest(l) for l in layers}
    assert not repo.has_image(_ref(registry))


def test_corrupt_config(repo, registry):
    manifest, blobs = registry.add_image("test/img", "latest", _layers(1))
    registry.corrupt.add(json.loads(manifest)["config"]["digest"])
    with pytest.raises(IntegrityError):
        RegistryClient(repo, insecure=True).pull(_ref(registry))


def test_unknown_tag(repo, registry):
    with pytest.raises(ImageNotFoundError):
        RegistryClient(repo, insecure=True).pull(_ref(registry, "test/nothing"))
    assert repo.list_images() == []


def test_manifest_list_selects_host_arch(repo, registry):
    assert host_architecture() == "amd64"
    amd, _ = registry.add_image("test/multi", "amd64-only", _layers(1))
    arm, _ = registry.add_image("test/multi", "arm-only", _layers(2))
    _add_raw(registry, "test/multi", "latest", {
        "schemaVersion": 2,
        "mediaType": MT_DOCKER_LIST,
        "manifests": [
            {"digest": helpers.digest(arm), "size": len(arm), "platform": {"architecture": "arm64", "os": "linux"}},
            {"digest": helpers.digest(amd), "size": len(amd), "platform": {"architecture": "amd64", "os": "linux"}},
        ],
    })
    client = RegistryClient(repo, insecure=True)
    manifest = client.fetch_manifest(_ref(registry, "test/multi"))
    assert manifest.raw == amd
    assert client.pull(_ref(registry, "test/multi")).downloaded == 1


def test_manifest_list_no_match(repo, registry):
    arm, _ = registry.add_image("test/multi", "arm-only", _layers(1))
    _add_raw(registry, "test/multi", "latest", {
        "schemaVersion": 2, "mediaType": MT_DOCKER_LIST,
        "manifests": [{"digest": helpers.digest(arm), "platform": {"architecture": "arm64", "os": "linux"}}],
    })
    with pytest.raises(UnsupportedManifestError):
        RegistryClient(repo, insecure=True).pull(_ref(registry, "test/multi"))


def test_oci_manifest_accepted(repo, registry):
    manifest, _ = registry.add_image("test/oci", "src", _layers(1))
    doc = json.loads(manifest)
    doc["mediaType"] = MT_OCI_MANIFEST
    _add_raw(registry, "test/oci", "latest", doc)
    assert RegistryClient(repo, insecure=True).pull(_ref(registry, "test/oci")).downloaded == 1


def test_schema1_rejected(repo, registry):
    _add_raw(registry, "test/old", "latest", {
        "schemaVersion": 1, "name": "test/old", "tag": "latest", "fsLayers": [], "history": [],
    })
    with pytest.raises(UnsupportedManifestError):
        RegistryClient(repo, insecure=True).pull(_ref(registry, "test/old"))


def test_unknown_media_type(repo, registry):
    manifest, _ = registry.add_image("test/odd", "src", _layers(1))
    doc = json.loads(manifest)
    doc["mediaType"] = "application/x-something"
    _add_raw(registry, "test/odd", "latest", doc)
    with pytest.raises(UnsupportedManifestError):
        RegistryClient(repo, insecure=True).pull(_ref(registry, "test/odd"))


def test_pull_by_digest(repo, registry):
    manifest, _ = registry.add_image("test/img", "latest", _layers(1))
    ref = _ref(registry, tag=helpers.digest(manifest))
    assert RegistryClient(repo, insecure=True).fetch_manifest(ref).raw == manifest


def test_unreachable_registry(repo):
    from udocker.errors import RegistryError

    with pytest.raises(RegistryError):
        RegistryClient(repo, insecure=True, retries=0, timeout=2).pull(ImageRef("127.0.0.1:1", "x/y", "latest"))
