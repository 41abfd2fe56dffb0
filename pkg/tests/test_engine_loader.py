import os
import re
import shutil
import subprocess

import pytest

import helpers
from udocker import engine_loader as el
from udocker.errors import FormatError, ModeUnavailableError, NotFoundError
from udocker.metadata import Bind, ExecSpec
from udocker.pathmap import PathMap

ENV = {"PATH": "/usr/local/bin:/bin", "HOME": "/root"}
LIBS = ("libc.so.6", "libm.so.6", "libz.so.1")


def ldconfig_print(cache):
    out = subprocess.run([helpers.LDCONFIG, "-p", "-C", str(cache)], capture_output=True, text=True,
                         check=True).stdout
    return sorted(re.findall(r"^\s+(\S+) \(.*\) => (\S+)$", out, re.M))


@pytest.fixture(params=["new", "old", "compat"])
def cache_root(request, tmp_path):
    root = tmp_path / "r"
    libdir = root / "lib/x86_64-linux-gnu"
    libdir.mkdir(parents=True)
    (root / "etc").mkdir()
    for lib in LIBS:
        shutil.copy2("/lib/x86_64-linux-gnu/" + lib, libdir)
    (root / "etc/ld.so.conf").write_text("/lib/x86_64-linux-gnu\n")
    subprocess.run([helpers.LDCONFIG, "-r", str(root), "-c", request.param], check=True, capture_output=True)
    return root, request.param


def test_cache_matches_ldconfig(cache_root):
    root, fmt = cache_root
    cache = root / "etc/ld.so.cache"
    view = el.parse_ld_so_cache(str(cache))
    expect = ldconfig_print(cache)
    assert len(expect) == 3
    assert sorted(view.entries) == expect
    assert view.format == ("old" if fmt == "old" else "new")
    assert view.directories() == ["/lib/x86_64-linux-gnu"]


def test_cache_rebased(tmp_path):
    view = el.LdSoCacheView([("libm.so.6", "/usr/lib64/libm.so.6")])
    pm = PathMap(str(tmp_path), sysdirs=())
    assert view.rebased(pm) == [("libm.so.6", str(tmp_path) + "/usr/lib64/libm.so.6")]


@pytest.mark.parametrize("blob", [b"", b"garbage", b"glibc-ld.so.cache1.1", b"ld.so-1.7.0\0\xff\xff\0\0"])
def test_cache_bad(blob):
    with pytest.raises(FormatError):
        el.parse_ld_so_cache_bytes(blob)


def test_cache_fallback(tmp_path, caplog):
    (tmp_path / "etc").mkdir()
    (tmp_path / "etc/ld.so.cache").write_bytes(b"")
    (tmp_path / "usr/lib").mkdir(parents=True)
    pm = PathMap(str(tmp_path), sysdirs=())
    assert el.cache_view(pm) is None
    assert "scanning default directories" in caplog.text
    assert el.library_dirs(pm) == [str(tmp_path / "usr/lib")]


def test_find_loader(container):
    pm = PathMap(container.rootfs)
    assert el.find_loader(pm) == "/lib64/ld-linux-x86-64.so.2"


def test_missing_loader(tmp_path):
    (tmp_path / "ROOT/bin").mkdir(parents=True)
    with pytest.raises(ModeUnavailableError) as info:
        el.prepare(str(tmp_path / "ROOT"), "F1")
    assert info.value.exit_code == 5
    assert "(fallback: P1)" in str(info.value)


def _spec(argv, **kw):
    return ExecSpec(list(argv), dict(ENV), **kw)


def test_f1_plan(container, interposer_build):
    lenv = el.prepare(container.rootfs, "F1", interposer=interposer_build)
    root = os.path.realpath(container.rootfs)
    exe, argv = el.plan_initial_exec(lenv, _spec(["ls", "-l"]))
    assert exe == root + "/lib64/ld-linux-x86-64.so.2"
    assert argv == [exe, "--argv0", "ls", root + "/bin/ls", "-l"]
    assert lenv.library_path and all(d.startswith(root + "/") for d in lenv.library_path)
    assert lenv.control_env[el.ENV_ROOT] == root


def test_shebang_plan(container, interposer_build):
    script = os.path.join(container.rootfs, "usr/local/bin/s.sh")
    with open(script, "w") as fh:
        fh.write("#!/bin/sh -e\necho hi\n")
    os.chmod(script, 0o755)
    lenv = el.prepare(container.rootfs, "F1", interposer=interposer_build)
    exe, argv = el.plan_initial_exec(lenv, _spec(["s.sh", "x"]))
    assert argv[2:] == ["/bin/sh", os.path.realpath(container.rootfs) + "/bin/dash", "-e", "/usr/local/bin/s.sh", "x"]


def test_environment(container, interposer_build):
    lenv = el.prepare(container.rootfs, "F1", interposer=interposer_build)
    env = lenv.environment({"A": "1", "UDOCKER_FK_ROOT": "/evil", "LD_LIBRARY_PATH": "/opt/lib:rel"})
    root = os.path.realpath(container.rootfs)
    assert env["A"] == "1"
    assert env[el.ENV_ROOT] == root
    assert env["LD_LIBRARY_PATH"].split(":")[:2] == [root + "/opt/lib", "rel"]
    assert env[el.ENV_ULDPATH] == "/opt/lib:rel"
    assert env["LD_PRELOAD"] == interposer_build


def run(container, capfd, mode, argv, binds=(), cwd="/"):
    engine = el.LoaderEngine(mode, interposer=el_interposer(container), container_dir=os.path.dirname(container.rootfs))
    capfd.readouterr()
    code = engine.run(_spec(argv, binds=list(binds), cwd=cwd), container.rootfs)
    out = capfd.readouterr()
    return code, out.out, out.err


def el_interposer(container):
    from udocker import tools
    from udocker.repo_store import RepoLayout

    return tools.interposer_path(RepoLayout(os.path.dirname(os.path.dirname(os.path.dirname(container.rootfs)))))


MODES = ["F1", "F2", "F3", "F4"]


@pytest.mark.parametrize("mode", MODES)
def test_reads_container_file(container, capfd, mode):
    assert run(container, capfd, mode, ["cat", "/etc/msg"])[:2] == (0, "inside the container\n")


@pytest.mark.parametrize("mode", MODES)
def test_cwd_in_bind(container, capfd, hostdir, mode):
    code, out, _ = run(container, capfd, mode, ["sh", "-c", "cd /data && pwd -P && cat f && cd / && pwd -P"],
                       binds=[Bind(str(hostdir), "/data")])
    assert out == "/data\nfrom the host\n/\n"


@pytest.mark.parametrize("mode", MODES)
def test_ld_library_path_reprefixed(container, capfd, mode):
    # the loader receives the rebased value; the program itself sees what it set
    code, out, _ = run(container, capfd, mode,
                       ["sh", "-c", "export LD_LIBRARY_PATH=/usr/lib64; grep -az '^LD_LIBRARY_PATH=' /proc/self/environ;"
                        " echo; echo $LD_LIBRARY_PATH; env | grep '^LD_LIBRARY_PATH='"])
    root = os.path.realpath(container.rootfs)
    exec_time, own, child = out.split("\n")[:3]
    assert exec_time.rstrip("\0").split("=", 1)[1].split(":")[0] == root + "/usr/lib64"
    assert own == "/usr/lib64"
    assert child == "LD_LIBRARY_PATH=/usr/lib64"


@pytest.mark.parametrize("mode", ["F2", "F3"])
def test_no_host_libraries_mapped(container, capfd, mode, interposer_build):
    code, out, _ = run(container, capfd, mode, ["cat", "/proc/self/maps"])
    assert code == 0
    root = os.path.realpath(container.rootfs)
    cdir = os.path.dirname(root)
    mapped = {line.split()[-1] for line in out.splitlines() if len(line.split()) >= 6 and line.split()[-1].startswith("/")}
    interposer = os.path.realpath(el_interposer(container))
    assert mapped
    leaks = [p for p in mapped if not (p.startswith(root + "/") or p.startswith(cdir + "/") or p == interposer)]
    assert leaks == []


def test_f2_loader_copy(container, capfd):
    cdir = os.path.dirname(container.rootfs)
    before = helpers.tree_hashes(container.rootfs)
    run(container, capfd, "F2", ["true"])
    copy = os.path.join(cdir, el.F2_LOADER)
    assert os.path.isfile(copy)
    with open(copy, "rb") as fh:
        assert b"\0/etc/ld.so.cache\0" not in fh.read()
    assert helpers.tree_hashes(container.rootfs) == before
    el.revert(cdir)
    assert not os.path.exists(copy)


def test_f3_revert_identical(container, capfd):
    before = helpers.tree_hashes(container.rootfs)
    assert run(container, capfd, "F3", ["ls", "/"])[0] == 0
    assert helpers.tree_hashes(container.rootfs) != before
    el.revert(os.path.dirname(container.rootfs))
    assert helpers.tree_hashes(container.rootfs) == before


def test_f4_patches_on_exec(container, capfd):
    from udocker.elf_patcher import PatchJournal

    cdir = os.path.dirname(container.rootfs)
    root = os.path.realpath(container.rootfs)
    assert run(container, capfd, "F4", ["sh", "-c", "ls / >/dev/null; echo done"])[1] == "done\n"
    patched = PatchJournal(cdir).patched_paths()
    assert root + "/bin/dash" in patched
    assert root + "/bin/ls" in patched
    assert root + "/bin/cat" not in patched


@pytest.mark.parametrize("mode", MODES)
def test_static_initial_command(container, capfd, mode):
    with pytest.raises(ModeUnavailableError) as info:
        run(container, capfd, mode, ["/usr/local/bin/probe", "cat", "/etc/msg"])
    assert "statically linked" in str(info.value)


def test_static_child_fails_clearly(container, capfd):
    code, out, err = run(container, capfd, "F1", ["sh", "-c", "/usr/local/bin/probe cat /etc/msg; echo rc=$?"])
    assert "rc=0" not in out
    assert "statically linked" in err


def test_exit_code_and_missing(container, capfd):
    assert run(container, capfd, "F1", ["sh", "-c", "exit 9"])[0] == 9
    with pytest.raises(NotFoundError):
        run(container, capfd, "F1", ["/bin/nothing"])


def test_interposer_required(container):
    with pytest.raises(ModeUnavailableError):
        el.LoaderEngine("F1", interposer="/nonexistent.so").run(_spec(["true"]), container.rootfs)
