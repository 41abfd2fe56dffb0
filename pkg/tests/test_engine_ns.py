import json
import os
import stat
import sys

import pytest

from udocker import engine_ns
from udocker.errors import DelegationUnavailableError, ModeUnavailableError, NotFoundError
from udocker.metadata import OCI_VERSION, Bind, ExecSpec, Identity

ENV = {"PATH": "/usr/local/bin:/bin", "HOME": "/root"}

needs_userns = pytest.mark.skipif(not engine_ns.probe(), reason="user namespaces not permitted here")


def _spec(argv, **kw):
    return ExecSpec(list(argv), dict(ENV), **kw)


def run(container, capfd, argv, **kw):
    capfd.readouterr()
    code = engine_ns.NamespaceEngine().run(_spec(argv, **kw), container.rootfs)
    out = capfd.readouterr()
    return code, out.out, out.err


def test_plan(container):
    plan = engine_ns.NamespacePlan.for_spec(_spec(["true"], identity=Identity(0, 0, "root")), container.rootfs)
    assert plan.uid_map == (0, os.getuid(), 1)
    assert plan.namespaces == {"user", "mount", "pid"}


@needs_userns
def test_root_identity_and_pid1(container, capfd):
    code, out, _ = run(container, capfd, ["sh", "-c", "id -u; echo $$; cat /etc/msg"], identity=Identity(0, 0, "root"))
    assert (code, out) == (0, "0\n1\ninside the container\n")


@needs_userns
def test_host_files_hidden(container, capfd, tmp_path):
    secret = tmp_path / "secret-outside"
    secret.write_text("host only\n")
    code, out, _ = run(container, capfd, ["sh", "-c", "cat %s || echo unreadable" % secret])
    assert out == "unreadable\n"


@needs_userns
def test_bind_visible_and_cleaned_up(container, capfd, hostdir):
    code, out, _ = run(container, capfd, ["sh", "-c", "cat /data/new/f; grep -c ' /data/new ' /proc/self/mounts"],
                       binds=[Bind(str(hostdir), "/data/new")])
    assert out == "from the host\n1\n"
    assert not os.path.lexists(os.path.join(container.rootfs, "data"))


@needs_userns
def test_exit_code_and_cwd(container, capfd):
    assert run(container, capfd, ["sh", "-c", "pwd; exit 7"], cwd="/etc")[:2] == (7, "/etc\n")
    code, out, err = run(container, capfd, ["sh", "-c", "pwd"], cwd="/nope")
    assert out == "/\n" and "missing" in err


@needs_userns
def test_missing_command(container, capfd):
    assert run(container, capfd, ["/bin/nothing"])[0] == 127


def test_missing_rootfs(tmp_path):
    with pytest.raises(NotFoundError):
        engine_ns.NamespaceEngine().run(_spec(["true"]), str(tmp_path / "none"))


FAKE_RUNTIME = """#!%s
import json, os, sys
args = sys.argv[1:]
bundle = args[args.index("--bundle") + 1]
with open(os.path.join(bundle, "config.json")) as fh:
    doc = json.load(fh)
if doc.get("ociVersion") != "1.0.2" or not doc.get("process", {}).get("args"):
    sys.stderr.write("fake-runtime: invalid bundle config\\n")
    sys.exit(1)
with open(os.environ["FAKE_LOG"], "w") as fh:
    json.dump({"argv": args, "config": doc}, fh)
sys.exit(int(doc["process"]["args"][-1]))
"""


@pytest.fixture
def fake_runtime(tmp_path, monkeypatch):
    bindir = tmp_path / "fakebin"
    bindir.mkdir()
    exe = bindir / "myruntime"
    exe.write_text(FAKE_RUNTIME % sys.executable)
    exe.chmod(exe.stat().st_mode | stat.S_IXUSR)
    log = tmp_path / "log.json"
    monkeypatch.setenv("PATH", "%s:%s" % (bindir, os.environ["PATH"]))
    monkeypatch.setenv("FAKE_LOG", str(log))
    monkeypatch.delenv(engine_ns.RUNTIME_ENV, raising=False)
    return exe, log


def test_delegation(container, fake_runtime, monkeypatch):
    exe, log = fake_runtime
    monkeypatch.setenv(engine_ns.RUNTIME_ENV, "myruntime")
    spec = _spec(["sh", "-c", "exit $0", "5"], binds=[Bind("/tmp", "/mnt")])
    cdir = os.path.dirname(container.rootfs)
    code = engine_ns.NamespaceEngine(delegate=True, container_dir=cdir).run(spec, container.rootfs)
    assert code == 5
    got = json.loads(log.read_text())
    assert got["argv"][:2] == ["--root", os.path.join(cdir, "runtime-state")]
    assert got["argv"][2:5] == ["run", "--bundle", os.path.join(cdir, "bundle")]
    assert got["config"]["ociVersion"] == OCI_VERSION
    assert got["config"]["process"]["args"] == spec.argv
    assert got["config"]["root"]["path"] == container.rootfs
    assert {"destination": "/mnt", "type": "bind", "source": "/tmp", "options": ["rbind", "rw"]} \
        in got["config"]["mounts"]


def test_named_runtime(container, fake_runtime):
    assert engine_ns.find_runtime("myruntime") == str(fake_runtime[0])
    code = engine_ns.run_delegated(_spec(["x", "0"]), container.rootfs, runtime="myruntime")
    assert code == 0


def test_no_runtime(container, monkeypatch, tmp_path):
    monkeypatch.setenv("PATH", str(tmp_path))
    monkeypatch.delenv(engine_ns.RUNTIME_ENV, raising=False)
    with pytest.raises(DelegationUnavailableError) as info:
        engine_ns.NamespaceEngine(delegate=True).run(_spec(["true"]), container.rootfs)
    assert isinstance(info.value, ModeUnavailableError)
    assert info.value.exit_code == 5


def test_runtime_rejects_bundle(container, fake_runtime, monkeypatch, capfd):
    real = engine_ns.to_oci

    def broken(spec, rootfs):
        doc = real(spec, rootfs)
        del doc["ociVersion"]
        return doc

    monkeypatch.setattr(engine_ns, "to_oci", broken)
    capfd.readouterr()
    code = engine_ns.run_delegated(_spec(["true", "0"]), container.rootfs, runtime="myruntime")
    assert code == 1
    assert "invalid bundle config" in capfd.readouterr().err
