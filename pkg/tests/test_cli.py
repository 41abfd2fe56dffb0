import gzip
import os
import subprocess
import sys
import tarfile

import pytest

import helpers
from conftest import seed_tools
from udocker import __version__, cli, engine_ns
from udocker.repo_store import LocalRepository


@pytest.fixture
def ud(tmp_path, capfd, monkeypatch, interposer_build):
    root = tmp_path / "udocker"
    monkeypatch.setenv("UDOCKER_DIR", str(root))
    seed_tools(root, interposer_build)

    def call(*argv):
        capfd.readouterr()
        code = cli.dispatch(list(argv))
        out = capfd.readouterr()
        return code, out.out, out.err

    call.root = root
    return call


@pytest.fixture
def image(registry, rootfs_tar):
    config = {"architecture": "amd64", "os": "linux",
              "config": {"Cmd": ["cat", "/etc/msg"], "Env": ["PATH=/usr/local/bin:/bin", "IMG=1"]}}
    registry.add_image("lib/tiny", "1.0", [gzip.compress(rootfs_tar)], config)
    return "%s/lib/tiny:1.0" % registry.host


def test_version(ud):
    assert ud("version") == (0, "udocker %s\n" % __version__, "")


def test_console_script(tmp_path):
    env = dict(os.environ, UDOCKER_DIR=str(tmp_path / "r"))
    proc = subprocess.run([sys.executable, "-m", "udocker.cli", "version"], capture_output=True, text=True, env=env)
    assert (proc.returncode, proc.stdout) == (0, "udocker %s\n" % __version__)
    proc = subprocess.run([sys.executable, "-m", "udocker.cli", "frobnicate"], capture_output=True, text=True, env=env)
    assert proc.returncode == 1 and "invalid choice" in proc.stderr


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["ps", "--bogus"], ["setup", "--execmode=Z9", "x"],
                                  ["rm"]])
def test_usage_errors(ud, argv):
    code, out, err = ud(*argv)
    assert code == 1 and out == "" and err


def test_missing_container(ud):
    for argv in (["run", "nosuch"], ["rm", "nosuch"], ["setup", "nosuch"], ["export", "nosuch"],
                 ["name", "nosuch", "x"]):
        code, out, err = ud(*argv)
        assert code == 2, argv
        assert "nosuch" in err


def test_pull_create_run_flow(ud, image, hostdir):
    assert ud("pull", "--insecure", image) == (0, image + "\n", "")
    assert ud("images")[1] == image + "\n"
    code, out, _ = ud("create", "--name", "web", image)
    cid = out.strip()
    assert code == 0 and len(cid) == 36
    assert ud("name", "web", "alias2")[0] == 0
    code, out, _ = ud("ps")
    assert out == "%s\tP1\tW\talias2,web\t%s\n" % (cid, image)
    assert ud("run", "web") == (0, "inside the container\n", "")
    code, out, _ = ud("run", "-v", "%s:/data" % hostdir, "-e", "X=7", "alias2", "sh", "-c", "cat /data/f; echo $X $IMG")
    assert (code, out) == (0, "from the host\n7 1\n")
    assert ud("run", "web", "sh", "-c", "exit 42")[0] == 42
    assert ud("create", "--name", "web", image)[0] == 6
    # containers own a private rootfs and config: they outlive their image
    assert ud("rmi", image)[0] == 0
    assert ud("images")[1] == ""
    assert ud("run", "web") == (0, "inside the container\n", "")
    assert ud("rmi", image)[0] == 2
    assert ud("rm", "web")[0] == 0
    assert ud("ps")[1] == ""


def test_pull_failures(ud, registry):
    code, _, err = ud("pull", "--insecure", "%s/lib/absent:1" % registry.host)
    assert code == 2
    code, _, err = ud("pull", "--insecure", "127.0.0.1:1/x/y:z")
    assert code == 7
    assert ud("pull", "BAD//ref")[0] == 1


def test_pull_credentials(ud, rootfs_tar, monkeypatch):
    with helpers.FakeRegistry(auth="basic") as reg:
        reg.add_image("p/q", "t", [gzip.compress(rootfs_tar)])
        ref = "%s/p/q:t" % reg.host
        assert ud("pull", "--insecure", ref)[0] == 7
        monkeypatch.setenv("UDOCKER_REGISTRY_USER", "alice")
        monkeypatch.setenv("UDOCKER_REGISTRY_PASSWORD", "secret")
        assert ud("pull", "--insecure", ref)[0] == 0


def test_corrupt_pull(ud, registry, rootfs_tar):
    layer = gzip.compress(rootfs_tar)
    registry.add_image("c/d", "1", [layer])
    registry.corrupt = {helpers.digest(layer)}
    code, _, err = ud("pull", "--insecure", "%s/c/d:1" % registry.host)
    assert code == 3 and "sha256" in err


def test_run_auto_creates(ud, image):
    ud("pull", "--insecure", image)
    code, out, _ = ud("run", "--name", "auto", image)
    assert (code, out) == (0, "inside the container\n")
    assert ",auto," in "," + ud("ps")[1].split("\t")[3] + ","
    assert ud("run", "%s/lib/other:1" % image.split("/")[0])[0] == 2


def test_setup_modes(ud, rootfs_tar, tmp_path):
    tar = tmp_path / "rootfs.tar"
    tar.write_bytes(rootfs_tar)
    cid = ud("import", "--name", "c", str(tar))[1].strip()
    rootfs = LocalRepository(str(ud.root)).get_container(cid).rootfs
    before = helpers.tree_hashes(rootfs)
    assert ud("setup", "--execmode=F3", "c")[0] == 0
    assert ud("setup", "c")[1] == "%s\tF3\n" % cid
    assert helpers.tree_hashes(rootfs) != before
    assert ud("run", "c", "cat", "/etc/msg")[1] == "inside the container\n"
    assert ud("setup", "--execmode=P1", "c")[0] == 0
    assert helpers.tree_hashes(rootfs) == before
    assert ud("run", "c", "/usr/local/bin/probe", "cat", "/etc/msg")[1] == "inside the container\n"


def test_static_in_f_mode(ud, rootfs_tar, tmp_path):
    tar = tmp_path / "rootfs.tar"
    tar.write_bytes(rootfs_tar)
    ud("import", "--name", "c", str(tar))
    ud("setup", "--execmode=F1", "c")
    code, _, err = ud("run", "c", "/usr/local/bin/probe", "id")
    assert code == 5 and "(fallback: P1)" in err


def test_r1_unavailable(ud, rootfs_tar, tmp_path, monkeypatch):
    tar = tmp_path / "rootfs.tar"
    tar.write_bytes(rootfs_tar)
    ud("import", "--name", "c", str(tar))
    assert ud("setup", "--execmode=R1", "c")[0] == 0
    monkeypatch.setattr(engine_ns, "probe", lambda: False)
    code, out, err = ud("run", "c", "cat", "/etc/msg")
    assert code == 5
    assert "(fallback: P1)" in err


@pytest.mark.skipif(not engine_ns.probe(), reason="user namespaces not permitted here")
def test_r1_run(ud, rootfs_tar, tmp_path):
    tar = tmp_path / "rootfs.tar"
    tar.write_bytes(rootfs_tar)
    ud("import", "--name", "c", str(tar))
    ud("setup", "--execmode=R1", "c")
    assert ud("run", "-u", "root", "c", "sh", "-c", "id -u; cat /etc/msg") == (0, "0\ninside the container\n", "")


def test_export_import_roundtrip(ud, rootfs_tar, tmp_path):
    tar = tmp_path / "rootfs.tar"
    tar.write_bytes(rootfs_tar)
    ud("import", "--name", "a", str(tar))
    ud("run", "a", "sh", "-c", "echo changed > /tmp/new")
    out = tmp_path / "a.tar"
    assert ud("export", "-o", str(out), "a")[0] == 0
    with tarfile.open(out) as t:
        assert "tmp/new" in t.getnames() or "./tmp/new" in t.getnames()
    cid = ud("import", "--name", "b", str(out))[1].strip()
    assert ud("run", "b", "cat", "/tmp/new")[1] == "changed\n"
    repo = LocalRepository(str(ud.root))
    assert helpers.tree_hashes(repo.get_container("a").rootfs) == helpers.tree_hashes(repo.get_container(cid).rootfs)
    assert ud("import", str(tmp_path / "none.tar"))[0] == 1


def test_import_garbage(ud, tmp_path):
    bad = tmp_path / "bad.tar"
    bad.write_bytes(b"not a tar archive at all" * 40)
    assert ud("import", str(bad))[0] == 3
    assert ud("ps")[1] == ""


def test_install(ud, monkeypatch):
    assert ud("install") == (0, "up-to-date %s\n" % __version__, "")
    assert ud("install", "--force")[1] == "installed %s\n" % __version__


def test_quiet_and_debug(ud, rootfs_tar, tmp_path):
    tar = tmp_path / "rootfs.tar"
    tar.write_bytes(rootfs_tar)
    ud("import", "--name", "c", str(tar))
    code, out, err = ud("-D", "run", "c", "cat", "/etc/msg")
    assert "running" in err
    code, out, err = ud("-q", "run", "c", "cat", "/etc/msg")
    assert err == ""


def test_stdout_records_are_parseable(ud, image):
    ud("pull", "--insecure", image)
    ud("create", image)
    ud("create", image)
    lines = ud("ps")[1].splitlines()
    assert len(lines) == 2
    assert all(len(line.split("\t")) == 5 for line in lines)
