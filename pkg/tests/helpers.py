"""Shared builders for the test suite: fixture binaries, rootfs trees, tar
layers and a small in-process Docker registry."""

import base64
import hashlib
import io
import json
import os
import shutil
import subprocess
import tarfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

HERE = os.path.dirname(os.path.abspath(__file__))
CSRC = os.path.join(HERE, "csrc")
LDCONFIG = shutil.which("ldconfig") or "/sbin/ldconfig"

# host programs copied into the dynamic test rootfs
HOST_PROGRAMS = (
    "dash", "cat", "ls", "env", "grep", "mkdir", "rm", "ln", "readlink", "sort",
    "id", "chmod", "chown", "mknod", "head", "wc", "touch", "mv", "cp", "echo", "true", "false", "uname",
)


def have_cc():
    return shutil.which("gcc") is not None


def compile_c(src, out, *flags):
    subprocess.run(["gcc", "-O2", "-o", out, src, *flags], check=True, capture_output=True)
    return out


def sha256_hex(data):
    return hashlib.sha256(data).hexdigest()


def digest(data):
    return "sha256:" + sha256_hex(data)


# -- rootfs -------------------------------------------------------------------

def _ldd(path):
    out = subprocess.run(["ldd", path], capture_output=True, text=True, check=False).stdout
    libs = []
    for line in out.splitlines():
        line = line.strip()
        if "=>" in line:
            target = line.split("=>", 1)[1].split("(")[0].strip()
            if target.startswith("/"):
                libs.append(target)
        elif line.startswith("/"):
            libs.append(line.split()[0])
    return libs


def _copy_in(root, host_path):
    dest = os.path.join(root, host_path.lstrip("/"))
    if os.path.exists(dest):
        return dest
    os.makedirs(os.path.dirname(dest), exist_ok=True)
    shutil.copy2(os.path.realpath(host_path), dest)
    return dest


def build_dynamic_rootfs(root, probe=None):
    """Minimal distribution-like tree made of host binaries and their libraries."""
    for d in ("bin", "etc", "tmp", "home", "root", "mnt", "work", "usr/local/bin", "var/tmp"):
        os.makedirs(os.path.join(root, d), exist_ok=True)
    os.chmod(os.path.join(root, "tmp"), 0o1777)
    libs = set()
    for name in HOST_PROGRAMS:
        host = shutil.which(name)
        if host is None:
            continue
        shutil.copy2(os.path.realpath(host), os.path.join(root, "bin", name))
        libs.update(_ldd(host))
    for lib in sorted(libs):
        _copy_in(root, lib)
    os.symlink("dash", os.path.join(root, "bin", "sh"))
    os.symlink("../bin", os.path.join(root, "usr", "bin"))
    with open(os.path.join(root, "etc", "ld.so.conf"), "w") as fh:
        fh.write("/lib/x86_64-linux-gnu\n/usr/lib/x86_64-linux-gnu\n")
    subprocess.run([LDCONFIG, "-r", root], check=True, capture_output=True)
    with open(os.path.join(root, "etc", "passwd"), "w") as fh:
        fh.write("root:x:0:0:root:/root:/bin/sh\nuser:x:1000:1000:user:/home/user:/bin/sh\n")
    with open(os.path.join(root, "etc", "group"), "w") as fh:
        fh.write("root:x:0:\nuser:x:1000:\n")
    with open(os.path.join(root, "etc", "msg"), "w") as fh:
        fh.write("inside the container\n")
    if probe:
        shutil.copy2(probe, os.path.join(root, "usr/local/bin/probe"))
    return root


def tar_tree(root):
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tar:
        for name in sorted(os.listdir(root)):
            tar.add(os.path.join(root, name), arcname=name)
    return buf.getvalue()


def tree_hashes(root, skip=()):
    """Map relative path -> (kind, content hash or link target, mode)."""
    out = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(dirnames + filenames):
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root)
            if rel in skip:
                continue
            st = os.lstat(path)
            if os.path.islink(path):
                out[rel] = ("l", os.readlink(path), 0)
            elif os.path.isdir(path):
                out[rel] = ("d", "", st.st_mode & 0o7777)
            else:
                with open(path, "rb") as fh:
                    out[rel] = ("f", sha256_hex(fh.read()), st.st_mode & 0o7777)
    return out


# -- layers ---------------------------------------------------------------------

def make_layer(entries, gzip=True):
    """Tar bytes from entries (name, kind, payload); kind in f, d, l, h."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w:gz" if gzip else "w") as tar:
        for name, kind, payload in entries:
            info = tarfile.TarInfo(name)
            info.mtime = 1_600_000_000
            if kind == "d":
                info.type = tarfile.DIRTYPE
                info.mode = 0o755
                tar.addfile(info)
            elif kind == "l":
                info.type = tarfile.SYMTYPE
                info.linkname = payload
                tar.addfile(info)
            elif kind == "h":
                info.type = tarfile.LNKTYPE
                info.linkname = payload
                tar.addfile(info)
            else:
                data = payload if isinstance(payload, bytes) else payload.encode()
                info.size = len(data)
                info.mode = 0o644
                tar.addfile(info, io.BytesIO(data))
    return buf.getvalue()


def make_image(layers, config=None):
    """(manifest bytes, {digest: blob}) for a schema-2 image."""
    config = config or {"architecture": "amd64", "os": "linux", "config": {"Cmd": ["/bin/sh"]}}
    cfg_blob = json.dumps(config).encode()
    blobs = {digest(cfg_blob): cfg_blob}
    descs = []
    for layer in layers:
        blobs[digest(layer)] = layer
        descs.append({
            "mediaType": "application/vnd.docker.image.rootfs.diff.tar.gzip",
            "size": len(layer),
            "digest": digest(layer),
        })
    manifest = {
        "schemaVersion": 2,
        "mediaType": "application/vnd.docker.distribution.manifest.v2+json",
        "config": {
            "mediaType": "application/vnd.docker.container.image.v1+json",
            "size": len(cfg_blob),
            "digest": digest(cfg_blob),
        },
        "layers": descs,
    }
    return json.dumps(manifest).encode(), blobs


# -- registry -------------------------------------------------------------------

class FakeRegistry:
    """Docker registry v2 subset served from memory on 127.0.0.1.

    ``auth`` is None, "bearer" or "basic".  ``corrupt`` holds blob digests
    whose payload is served with one byte flipped.
    """

    def __init__(self, auth=None, user="alice", password="secret"):
        self.manifests = {}
        self.blobs = {}
        self.auth = auth
        self.user = user
        self.password = password
        self.token = "tok-123"
        self.corrupt = set()
        self.challenge = True
        self.requests = []
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def host(self):
        return "127.0.0.1:%d" % self.server.server_address[1]

    def add_image(self, repository, tag, layers, config=None):
        manifest, blobs = make_image(layers, config)
        self.manifests[(repository, tag)] = manifest
        self.manifests[(repository, digest(manifest))] = manifest
        self.blobs.update(blobs)
        return manifest, blobs

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()

    def _handler(self):
        reg = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, code, body=b"", headers=None):
                self.send_response(code)
                for k, v in (headers or {}).items():
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _authorized(self):
                got = self.headers.get("Authorization", "")
                if reg.auth == "bearer":
                    return got == "Bearer " + reg.token
                if reg.auth == "basic":
                    raw = base64.b64encode(("%s:%s" % (reg.user, reg.password)).encode()).decode()
                    return got == "Basic " + raw
                return True

            def _challenge(self):
                if reg.auth == "bearer":
                    realm = "http://%s/token" % reg.host
                    return {"WWW-Authenticate": 'Bearer realm="%s",service="fake"' % realm}
                return {"WWW-Authenticate": 'Basic realm="fake"'}

            def do_GET(self):
                reg.requests.append(self.path)
                path = self.path.split("?", 1)[0]
                if path == "/token":
                    got = self.headers.get("Authorization", "")
                    raw = base64.b64encode(("%s:%s" % (reg.user, reg.password)).encode()).decode()
                    if got != "Basic " + raw:
                        return self._send(401, b"bad credentials")
                    body = json.dumps({"token": reg.token, "expires_in": 300}).encode()
                    return self._send(200, body, {"Content-Type": "application/json"})
                if not self._authorized():
                    return self._send(401, b"{}", self._challenge() if reg.challenge else {})
                if path in ("/v2/", "/v2"):
                    return self._send(200, b"{}")
                parts = path[len("/v2/"):].split("/")
                if len(parts) >= 3 and parts[-2] == "manifests":
                    body = reg.manifests.get(("/".join(parts[:-2]), parts[-1]))
                    if body is None:
                        return self._send(404, b"{}")
                    doc = json.loads(body)
                    return self._send(200, body, {
                        "Content-Type": doc.get("mediaType", ""),
                        "Docker-Content-Digest": digest(body),
                    })
                if len(parts) >= 3 and parts[-2] == "blobs":
                    body = reg.blobs.get(parts[-1])
                    if body is None:
                        return self._send(404, b"{}")
                    if parts[-1] in reg.corrupt:
                        mid = len(body) // 2
                        body = body[:mid] + bytes([body[mid] ^ 0x01]) + body[mid + 1:]
                    return self._send(200, body, {"Content-Type": "application/octet-stream"})
                return self._send(404, b"{}")

        return Handler


# -- independent path simulator ---------------------------------------------------

class ChrootSim:
    """Reference model of chroot-style path lookup, used to check engines.

    Walks container paths component by component against the host tree,
    clamping ``..`` at the root and reading symlinks itself.
    """

    def __init__(self, rootfs, binds=()):
        self.rootfs = os.path.realpath(rootfs)
        self.binds = sorted(((c.rstrip("/") or "/", os.path.realpath(h)) for h, c in binds),
                            key=lambda x: -len(x[0]))
        self.cwd = "/"

    def host(self, cpath):
        for c, h in self.binds:
            if cpath == c:
                return h
            if cpath.startswith(c + "/"):
                return h + cpath[len(c):]
        return self.rootfs + ("" if cpath == "/" else cpath)

    def resolve(self, path, follow_last=True):
        """Container path of ``path`` or None when it does not resolve."""
        todo = [c for c in path.split("/") if c]
        cur = [] if path.startswith("/") else [c for c in self.cwd.split("/") if c]
        hops = 0
        while todo:
            comp = todo.pop(0)
            if comp == ".":
                continue
            if comp == "..":
                if cur:
                    cur.pop()
                continue
            cand = "/" + "/".join(cur + [comp])
            hp = self.host(cand)
            if os.path.islink(hp) and (todo or follow_last):
                hops += 1
                if hops > 40:
                    return None
                target = os.readlink(hp)
                if target.startswith("/"):
                    cur = []
                todo = [c for c in target.split("/") if c] + todo
                continue
            if not os.path.lexists(hp):
                return None
            if todo and not os.path.isdir(hp):
                return None
            cur.append(comp)
        return "/" + "/".join(cur)

    def chdir(self, path):
        target = self.resolve(path)
        if target is None or not os.path.isdir(self.host(target)):
            return False
        self.cwd = target
        return True
