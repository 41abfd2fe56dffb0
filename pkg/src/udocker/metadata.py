"""Image configuration, launch specifications and OCI runtime documents."""

import dataclasses
import json
import logging
import os
import posixpath
import pwd

from .errors import FormatError, NoCommandError, SpecError

log = logging.getLogger(__name__)

OCI_VERSION = "1.0.2"
DEFAULT_PATH = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin"
# Engine-private variables never leak into the container through --hostenv.
PRIVATE_ENV_PREFIX = "UDOCKER_FK_"

HOSTAUTH_FILES = ("/etc/passwd", "/etc/group")
DRI_BINDS = ("/dev", "/sys", "/var/run")

_HONORED_KEYS = {"Entrypoint", "Cmd", "Env", "WorkingDir", "Volumes", "User"}


class ConfigTypeError(FormatError, TypeError):
    pass


@dataclasses.dataclass(frozen=True)
class ContainerConfig:
    entrypoint: tuple = ()
    cmd: tuple = ()
    env: tuple = ()
    working_dir: str = ""
    exposed_volumes: frozenset = frozenset()
    user: str = ""

    def env_map(self):
        out = {}
        for entry in self.env:
            key, _, value = entry.partition("=")
            out[key] = value
        return out


@dataclasses.dataclass(frozen=True)
class Bind:
    host: str
    container: str


@dataclasses.dataclass(frozen=True)
class Identity:
    uid: int
    gid: int
    username: str
    home: str = "/"


@dataclasses.dataclass
class RunOptions:
    """Command line overrides for one ``run``."""

    argv: list = dataclasses.field(default_factory=list)
    volumes: list = dataclasses.field(default_factory=list)
    env: list = dataclasses.field(default_factory=list)
    hostenv: bool = False
    hostauth: bool = False
    bindhome: bool = False
    user: str | None = None
    workdir: str | None = None
    dri: bool = False
    mode: str = "P1"


@dataclasses.dataclass
class ExecSpec:
    argv: list
    env: dict
    cwd: str = "/"
    binds: list = dataclasses.field(default_factory=list)
    identity: Identity = None
    mode: str = "P1"
    host_env_passthrough: bool = False
    bind_home: bool = False

    @property
    def emulate_identity(self):
        return self.identity is not None and (self.identity.uid, self.identity.gid) != (os.getuid(), os.getgid())

    def env_list(self):
        return ["%s=%s" % kv for kv in self.env.items()]


def _str_list(doc, key):
    value = doc.get(key)
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigTypeError("config field %s must be a list of strings, got %r" % (key, value))
    return tuple(value)


def parse_config(config_json):
    """Extract the runtime-relevant part of an image configuration blob."""
    try:
        doc = json.loads(config_json) if config_json else {}
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError("malformed image config: %s" % exc) from exc
    if not isinstance(doc, dict):
        raise ConfigTypeError("image config must be a JSON object")
    section = doc.get("config") or {}
    if not isinstance(section, dict):
        raise ConfigTypeError("config section must be an object")
    ignored = sorted(set(section) - _HONORED_KEYS)
    if ignored:
        log.debug("ignoring image config keys: %s", ", ".join(ignored))
    env = []
    for entry in _str_list(section, "Env"):
        if "=" not in entry:
            entry += "="
        env.append(entry)
    volumes = section.get("Volumes") or {}
    if not isinstance(volumes, dict):
        raise ConfigTypeError("Volumes must be an object")
    workdir = section.get("WorkingDir") or ""
    user = section.get("User") or ""
    if not isinstance(workdir, str) or not isinstance(user, str):
        raise ConfigTypeError("WorkingDir and User must be strings")
    return ContainerConfig(
        entrypoint=_str_list(section, "Entrypoint"),
        cmd=_str_list(section, "Cmd"),
        env=tuple(env),
        working_dir=workdir,
        exposed_volumes=frozenset(volumes),
        user=user,
    )


def parse_volume(text):
    """``-v host[:container]`` into a Bind with normalized absolute paths."""
    host, sep, container = text.partition(":")
    if not sep:
        container = host
    if not host.startswith("/"):
        raise SpecError("bind host path must be absolute: %r" % text)
    if not container.startswith("/"):
        raise SpecError("bind container path must be absolute: %r" % text)
    return Bind(posixpath.normpath(host), posixpath.normpath(container))


def _passwd_entries(path):
    try:
        with open(path) as fh:
            for line in fh:
                fields = line.rstrip("\n").split(":")
                if len(fields) >= 7:
                    yield fields
    except OSError:
        return


def resolve_identity(user, passwd_files=()):
    """Map a ``--user`` value to the identity presented inside the container.

    Accepts ``name``, ``uid`` or ``uid:gid``.  Names are looked up in the
    given passwd files first and then in the host database.
    """
    if user is None or user == "":
        entry = pwd.getpwuid(os.getuid())
        return Identity(entry.pw_uid, entry.pw_gid, entry.pw_name, entry.pw_dir)
    if user == "root":
        return Identity(0, 0, "root", "/root")
    name, _, group = user.partition(":")
    if group and not group.isdigit():
        raise SpecError("group must be numeric in --user=%s" % user)
    if name.isdigit():
        uid = int(name)
        username, gid, home = str(uid), int(group) if group else uid, "/"
        for fields in _iter_all(passwd_files):
            if fields[2] == name:
                username, home = fields[0], fields[5]
                gid = int(group) if group else int(fields[3])
                break
        return Identity(uid, gid, username, home)
    for fields in _iter_all(passwd_files):
        if fields[0] == name:
            return Identity(int(fields[2]), int(group) if group else int(fields[3]), name, fields[5])
    try:
        entry = pwd.getpwnam(name)
    except KeyError:
        raise SpecError("unknown user %r" % name) from None
    return Identity(entry.pw_uid, int(group) if group else entry.pw_gid, name, entry.pw_dir)


def _iter_all(paths):
    for path in paths:
        yield from _passwd_entries(path)


def build_exec_spec(cfg, overrides, host_env=None, rootfs=None):
    """Merge image config and command line overrides into an ExecSpec.

    ``host_env`` defaults to ``os.environ``; ``rootfs`` is only used to look
    up user names in the container's own passwd file.
    """
    if host_env is None:
        host_env = os.environ
    if overrides.argv:
        argv = list(cfg.entrypoint) + list(overrides.argv)
    else:
        argv = list(cfg.entrypoint) + list(cfg.cmd)
    if not argv:
        raise NoCommandError("no command given and the image defines none")

    env = cfg.env_map()
    if overrides.hostenv:
        for key, value in host_env.items():
            if not key.startswith(PRIVATE_ENV_PREFIX):
                env[key] = value
    for entry in overrides.env:
        key, sep, value = entry.partition("=")
        if not key:
            raise SpecError("invalid --env value %r" % entry)
        if not sep:
            if key not in host_env:
                continue
            value = host_env[key]
        env[key] = value
    env.setdefault("PATH", DEFAULT_PATH)

    if overrides.workdir:
        if not overrides.workdir.startswith("/"):
            raise SpecError("--workdir must be an absolute container path")
        cwd = overrides.workdir
    elif cfg.working_dir:
        cwd = cfg.working_dir
    else:
        cwd = "/"
    cwd = posixpath.normpath(cwd)
    if cwd.startswith("//"):
        cwd = cwd[1:]

    binds = [parse_volume(v) for v in overrides.volumes]
    if overrides.bindhome:
        home = pwd.getpwuid(os.getuid()).pw_dir
        binds.append(Bind(home, home))
    if overrides.hostauth:
        binds.extend(Bind(p, p) for p in HOSTAUTH_FILES)
    if overrides.dri:
        binds.extend(Bind(p, p) for p in DRI_BINDS)
    seen = set()
    unique = []
    for b in binds:
        if b not in seen:
            seen.add(b)
            unique.append(b)

    passwd_files = []
    if overrides.hostauth:
        passwd_files.append("/etc/passwd")
    elif rootfs:
        passwd_files.append(os.path.join(rootfs, "etc/passwd"))
    identity = resolve_identity(overrides.user, passwd_files)
    if overrides.user and "HOME" not in env:
        env["HOME"] = identity.home
    if cfg.user and not overrides.user:
        log.debug("image user %r not applied; running as invoking user", cfg.user)

    return ExecSpec(
        argv=argv,
        env=env,
        cwd=cwd,
        binds=unique,
        identity=identity,
        mode=overrides.mode,
        host_env_passthrough=overrides.hostenv,
        bind_home=overrides.bindhome,
    )


def to_oci(spec, rootfs):
    """Render an ExecSpec as an OCI runtime configuration for a rootless run."""
    for b in spec.binds:
        if not (b.host.startswith("/") and b.container.startswith("/")):
            raise SpecError("bind paths must be absolute: %r" % (b,))
    mounts = [{"destination": "/proc", "type": "proc", "source": "proc"}]
    for b in spec.binds:
        mounts.append({"destination": b.container, "type": "bind", "source": b.host, "options": ["rbind", "rw"]})
    ident = spec.identity or resolve_identity(None)
    return {
        "ociVersion": OCI_VERSION,
        "process": {
            "terminal": False,
            "user": {"uid": ident.uid, "gid": ident.gid},
            "args": list(spec.argv),
            "env": spec.env_list(),
            "cwd": spec.cwd,
            "noNewPrivileges": True,
        },
        "root": {"path": os.path.abspath(rootfs), "readonly": False},
        "mounts": mounts,
        "linux": {
            "namespaces": [{"type": "user"}, {"type": "mount"}, {"type": "pid"}],
            "uidMappings": [{"containerID": ident.uid, "hostID": os.getuid(), "size": 1}],
            "gidMappings": [{"containerID": ident.gid, "hostID": os.getgid(), "size": 1}],
        },
    }
