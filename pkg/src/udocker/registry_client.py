"""Docker Registry v2 client: token auth, manifests, verified blob download."""

import base64
import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import platform
import re
import time

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from .errors import (
    AuthError,
    ImageNotFoundError,
    IntegrityError,
    ProtocolError,
    RegistryError,
    UnsupportedManifestError,
)
from .repo_store import LayerDescriptor

log = logging.getLogger(__name__)

MT_DOCKER_MANIFEST = "application/vnd.docker.distribution.manifest.v2+json"
MT_DOCKER_LIST = "application/vnd.docker.distribution.manifest.list.v2+json"
MT_OCI_MANIFEST = "application/vnd.oci.image.manifest.v1+json"
MT_OCI_INDEX = "application/vnd.oci.image.index.v1+json"
MT_SCHEMA1 = (
    "application/vnd.docker.distribution.manifest.v1+json",
    "application/vnd.docker.distribution.manifest.v1+prettyjws",
)
MANIFEST_TYPES = (MT_DOCKER_MANIFEST, MT_OCI_MANIFEST)
LIST_TYPES = (MT_DOCKER_LIST, MT_OCI_INDEX)

DOCKER_HUB = "docker.io"
DOCKER_HUB_API = "registry-1.docker.io"
DEFAULT_PARALLEL = 4

_ARCH = {"x86_64": "amd64", "amd64": "amd64", "aarch64": "arm64", "arm64": "arm64", "armv7l": "arm", "ppc64le": "ppc64le", "s390x": "s390x", "i686": "386"}


def host_architecture():
    machine = platform.machine()
    return _ARCH.get(machine, machine)


@dataclasses.dataclass(frozen=True)
class AuthToken:
    token: str = ""
    scope: str = ""
    expiry: float = 0.0
    scheme: str = "Bearer"

    def applies_to(self, repository):
        if not self.token:
            return False
        # Basic credentials are registry-wide; bearer tokens are scoped
        return self.scheme == "Basic" or self.scope == pull_scope(repository)

    @property
    def expired(self):
        return bool(self.expiry) and time.time() >= self.expiry


@dataclasses.dataclass
class Manifest:
    schema_version: int
    config: LayerDescriptor
    layers: list
    media_type: str = MT_DOCKER_MANIFEST
    raw: bytes = b""


@dataclasses.dataclass
class PullResult:
    ref: object
    downloaded: int
    skipped: int


def pull_scope(repository):
    return "repository:%s:pull" % repository


_CHALLENGE_PARAM = re.compile(r'(\w+)="([^"]*)"')


def parse_challenge(header):
    """Split a WWW-Authenticate header into (scheme, params)."""
    scheme, _, rest = header.strip().partition(" ")
    return scheme.capitalize(), dict(_CHALLENGE_PARAM.findall(rest))


def sha256_digest(data):
    return "sha256:" + hashlib.sha256(data).hexdigest()


class RegistryClient:
    def __init__(self, repo, insecure=False, credentials=None, parallel=DEFAULT_PARALLEL, timeout=60, retries=3):
        self.repo = repo
        self.insecure = insecure
        self.credentials = credentials
        self.parallel = parallel
        self.timeout = timeout
        self.session = requests.Session()
        retry = Retry(
            total=retries,
            backoff_factor=0.5,
            status_forcelist=(429, 500, 502, 503, 504),
            allowed_methods=frozenset(["GET", "HEAD"]),
            raise_on_status=False,
        )
        adapter = HTTPAdapter(max_retries=retry, pool_maxsize=max(parallel, 10))
        self.session.mount("https://", adapter)
        self.session.mount("http://", adapter)
        self.session.headers["User-Agent"] = "udocker-python"

    def base_url(self, registry):
        host = DOCKER_HUB_API if registry == DOCKER_HUB else registry
        return "%s://%s" % ("http" if self.insecure else "https", host)

    def _get(self, url, **kwargs):
        kwargs.setdefault("timeout", self.timeout)
        try:
            return self.session.get(url, verify=not self.insecure, **kwargs)
        except requests.RequestException as exc:
            raise RegistryError("request to %s failed: %s" % (url, exc)) from exc

    def _headers(self, token, repository):
        if token and token.applies_to(repository):
            return {"Authorization": "%s %s" % (token.scheme, token.token)}
        return {}

    def authenticate(self, ref):
        """Obtain credentials for pulling ``ref.repository``."""
        scope = pull_scope(ref.repository)
        resp = self._get(self.base_url(ref.registry) + "/v2/")
        if resp.status_code != 401:
            if resp.status_code >= 400 and resp.status_code != 404:
                raise ProtocolError("registry %s: /v2/ returned %d" % (ref.registry, resp.status_code))
            return AuthToken("", scope, 0.0)
        header = resp.headers.get("WWW-Authenticate")
        if not header:
            raise ProtocolError("registry %s answered 401 without an authentication challenge" % ref.registry)
        scheme, params = parse_challenge(header)
        if scheme == "Basic":
            if not self.credentials:
                raise AuthError("registry %s requires credentials" % ref.registry)
            raw = ("%s:%s" % self.credentials).encode()
            return AuthToken(base64.b64encode(raw).decode(), scope, 0.0, "Basic")
        if scheme != "Bearer" or "realm" not in params:
            raise ProtocolError("unsupported authentication challenge: %s" % header)
        query = {"scope": scope}
        if "service" in params:
            query["service"] = params["service"]
        try:
            resp = self.session.get(
                params["realm"], params=query, auth=self.credentials, timeout=self.timeout, verify=not self.insecure
            )
        except requests.RequestException as exc:
            raise AuthError("auth endpoint %s unreachable: %s" % (params["realm"], exc)) from exc
        if resp.status_code != 200:
            raise AuthError("auth endpoint refused (%d): %s" % (resp.status_code, resp.text.strip()[:200]))
        try:
            doc = resp.json()
            token = doc.get("token") or doc.get("access_token")
        except ValueError:
            token = None
        if not token:
            raise AuthError("auth endpoint returned no token")
        expires = float(doc.get("expires_in", 60))
        return AuthToken(token, scope, time.time() + expires)

    def _fetch_manifest_doc(self, ref, reference, token):
        url = "%s/v2/%s/manifests/%s" % (self.base_url(ref.registry), ref.repository, reference)
        headers = self._headers(token, ref.repository)
        headers["Accept"] = ", ".join(MANIFEST_TYPES + LIST_TYPES)
        resp = self._get(url, headers=headers)
        if resp.status_code == 404:
            raise ImageNotFoundError("image not found in registry: %s" % ref)
        if resp.status_code == 401:
            raise AuthError("not authorized to pull %s: %s" % (ref, resp.text.strip()[:200]))
        if resp.status_code != 200:
            raise RegistryError("manifest request for %s failed with HTTP %d" % (ref, resp.status_code))
        body = resp.content
        expected = reference if reference.startswith("sha256:") else resp.headers.get("Docker-Content-Digest")
        if expected and expected.startswith("sha256:") and sha256_digest(body) != expected:
            raise IntegrityError("manifest for %s does not match digest %s" % (ref, expected))
        try:
            doc = json.loads(body)
        except ValueError as exc:
            raise ProtocolError("manifest for %s is not JSON" % ref) from exc
        ctype = resp.headers.get("Content-Type", "").split(";")[0].strip()
        media = doc.get("mediaType") or ctype
        if media in MT_SCHEMA1 or doc.get("schemaVersion") == 1:
            raise UnsupportedManifestError("legacy schema-1 manifest for %s is not supported" % ref)
        return media, doc, body

    def fetch_manifest(self, ref, token=None):
        media, doc, body = self._fetch_manifest_doc(ref, ref.tag, token)
        if media in LIST_TYPES:
            arch = host_architecture()
            chosen = None
            for entry in doc.get("manifests", []):
                plat = entry.get("platform", {})
                if plat.get("architecture") == arch and plat.get("os", "linux") == "linux":
                    chosen = entry
                    break
            if chosen is None:
                raise UnsupportedManifestError("no %s/linux image in manifest list for %s" % (arch, ref))
            media, doc, body = self._fetch_manifest_doc(ref, chosen["digest"], token)
        if media not in MANIFEST_TYPES:
            raise UnsupportedManifestError("unsupported manifest media type %r for %s" % (media, ref))
        try:
            config = LayerDescriptor.from_json(doc["config"])
            layers = [LayerDescriptor.from_json(l) for l in doc.get("layers", [])]
        except (KeyError, TypeError) as exc:
            raise ProtocolError("malformed manifest for %s" % ref) from exc
        return Manifest(int(doc.get("schemaVersion", 2)), config, layers, media, body)

    def _blob_response(self, ref, desc, token):
        url = "%s/v2/%s/blobs/%s" % (self.base_url(ref.registry), ref.repository, desc.digest)
        resp = self._get(url, headers=self._headers(token, ref.repository), stream=True)
        if resp.status_code == 404:
            resp.close()
            raise ImageNotFoundError("blob %s not found for %s" % (desc.digest, ref))
        if resp.status_code != 200:
            resp.close()
            raise RegistryError("blob %s download failed with HTTP %d" % (desc.digest, resp.status_code))
        return resp

    def fetch_blob(self, ref, desc, token=None):
        with self._blob_response(ref, desc, token) as resp:
            data = resp.content
        if sha256_digest(data) != desc.digest:
            raise IntegrityError("blob %s failed digest verification" % desc.digest)
        return data

    def download_layer(self, ref, desc, token=None):
        with self._blob_response(ref, desc, token) as resp:
            try:
                return self.repo.store_layer(desc, resp.iter_content(1 << 20))
            except requests.RequestException as exc:
                raise RegistryError("download of %s interrupted: %s" % (desc.digest, exc)) from exc

    def pull(self, ref):
        """Download and register ``ref``; layers already stored are skipped."""
        token = self.authenticate(ref)
        manifest = self.fetch_manifest(ref, token)
        config = self.fetch_blob(ref, manifest.config, token)
        todo = []
        for desc in manifest.layers:
            if self.repo.has_layer(desc.digest) or desc in todo:
                continue
            todo.append(desc)
        errors = []
        if todo:
            with concurrent.futures.ThreadPoolExecutor(max_workers=self.parallel) as pool:
                futures = {pool.submit(self.download_layer, ref, d, token): d for d in todo}
                for fut in concurrent.futures.as_completed(futures):
                    try:
                        fut.result()
                        log.info("stored layer %s", futures[fut].digest)
                    except Exception as exc:
                        errors.append(exc)
        if errors:
            raise errors[0]
        self.repo.register_image(ref, manifest.raw, config, [d.digest for d in manifest.layers])
        return PullResult(ref, len(todo), len(manifest.layers) - len(todo))
