import io
import os
import re
import shutil
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import helpers  # noqa: E402
from udocker import tools  # noqa: E402
from udocker.repo_store import LocalRepository, RepoLayout  # noqa: E402


needs_cc = pytest.mark.skipif(not helpers.have_cc(), reason="gcc not available")


@pytest.fixture(scope="session")
def bins(tmp_path_factory):
    """Compiled fixture programs: probe (static), hello + libfix.so (dynamic)."""
    if not helpers.have_cc():
        pytest.skip("gcc not available")
    out = tmp_path_factory.mktemp("bins")
    c = helpers.CSRC
    paths = {
        "probe": helpers.compile_c(os.path.join(c, "probe.c"), str(out / "probe"), "-static"),
        "libfix": helpers.compile_c(os.path.join(c, "libfix.c"), str(out / "libfix.so"),
                                    "-shared", "-fPIC", "-Wl,-soname,libfix.so"),
    }
    paths["hello"] = helpers.compile_c(
        os.path.join(c, "hello.c"), str(out / "hello"),
        "-L%s" % out, "-lfix", "-Wl,--enable-new-dtags", "-Wl,-rpath,/nonexistent/lib",
    )
    return paths


@pytest.fixture(scope="session")
def interposer_build(tmp_path_factory):
    if not helpers.have_cc():
        pytest.skip("gcc not available")
    out = tmp_path_factory.mktemp("tools") / tools.INTERPOSER
    return tools.build_interposer(str(out))


@pytest.fixture(scope="session")
def rootfs_tar(tmp_path_factory, bins):
    root = tmp_path_factory.mktemp("template") / "ROOT"
    root.mkdir()
    helpers.build_dynamic_rootfs(str(root), probe=bins["probe"])
    return helpers.tar_tree(str(root))


def seed_tools(root, interposer):
    """Pre-install the session's interposer so repositories skip compiling it."""
    layout = RepoLayout(str(root))
    os.makedirs(layout.lib, exist_ok=True)
    shutil.copy2(interposer, tools.interposer_path(layout))
    with open(os.path.join(layout.lib, tools.MARKER), "w") as fh:
        fh.write(tools.TOOLS_VERSION + "\n")


@pytest.fixture
def repo(tmp_path, monkeypatch):
    root = tmp_path / "udocker"
    monkeypatch.setenv("UDOCKER_DIR", str(root))
    return LocalRepository(str(root))


@pytest.fixture
def container(repo, rootfs_tar, interposer_build):
    """A container with the dynamic test rootfs, named ``c1``."""
    seed_tools(repo.root, interposer_build)
    rec = repo.import_container(io.BytesIO(rootfs_tar), "c1")
    return rec


@pytest.fixture
def hostdir(tmp_path):
    d = tmp_path / "hostdir"
    d.mkdir()
    (d / "f").write_text("from the host\n")
    return d


@pytest.fixture
def registry():
    with helpers.FakeRegistry() as reg:
        yield reg


# -- acceptance summary ---------------------------------------------------

_CRITERION = re.compile(r"::test_criterion_(\d+)_(\w+?)(\[|$)")
_criteria = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    num, name = int(m.group(1)), m.group(2)
    entry = _criteria.setdefault(num, {"name": name, "passed": 0, "failed": 0, "skipped": 0})
    if report.failed:
        entry["failed"] += 1
    elif report.when == "call" and report.passed:
        entry["passed"] += 1
    elif report.skipped:
        entry["skipped"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        e = _criteria[num]
        if e["failed"]:
            verdict = "FAIL"
        elif e["passed"]:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        cases = e["passed"] + e["failed"] + e["skipped"]
        terminalreporter.write_line("criterion %d %-28s %s (%d case%s)" % (
            num, e["name"], verdict, cases, "" if cases == 1 else "s"))
