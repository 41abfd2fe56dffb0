import os

import pytest

import helpers
from udocker import engine_loader, execution
from udocker.engine_ptrace import PtraceEngine
from udocker.errors import NotFoundError, UsageError
from udocker.metadata import ExecSpec


def _spec(argv):
    return ExecSpec(list(argv), {"PATH": "/usr/local/bin:/bin"})


def test_modes_documented():
    assert set(execution.MODE_HELP) == set(execution.MODES)
    assert set(execution.PATCHING_MODES) <= set(execution.MODES)


def test_check_mode():
    assert execution.check_mode("F2") == "F2"
    with pytest.raises(UsageError):
        execution.check_mode("p1")


def test_setup_transitions(repo, container):
    cdir = repo.container_dir(container.id)
    before = helpers.tree_hashes(container.rootfs)
    for mode in ("F2", "F3", "F4", "F3", "P2", "F1", "R1", "P1"):
        execution.setup(repo, "c1", mode)
        assert repo.get_container("c1").exec_mode == mode
        if mode not in ("F3", "F4"):
            assert helpers.tree_hashes(container.rootfs) == before, mode
        has_copy = os.path.exists(os.path.join(cdir, engine_loader.F2_LOADER))
        assert has_copy == (mode == "F2")


def test_setup_unknown(repo, container):
    with pytest.raises(UsageError):
        execution.setup(repo, "c1", "X1")
    with pytest.raises(NotFoundError):
        execution.setup(repo, "nope", "P1")
    assert repo.get_container("c1").exec_mode == "P1"


def test_make_engine(repo, container):
    rec = repo.get_container("c1")
    assert isinstance(execution.make_engine(repo, rec, "P2"), PtraceEngine)
    eng = execution.make_engine(repo, rec, "F1")
    assert isinstance(eng, engine_loader.LoaderEngine)
    with pytest.raises(UsageError):
        execution.make_engine(repo, rec, "Q")


@pytest.mark.parametrize("mode", ["P1", "P2", "F1", "F2", "F3", "F4"])
def test_run_each_mode(repo, container, capfd, mode):
    execution.setup(repo, "c1", mode)
    capfd.readouterr()
    code, stats = execution.run(repo, "c1", _spec(["sh", "-c", "cat /etc/msg; exit 3"]))
    assert (code, capfd.readouterr().out) == (3, "inside the container\n")
    assert (stats is not None) == mode.startswith("P")


def test_image_config_of_imported_container(repo, container):
    # imported trees have no image: an empty configuration
    assert execution.image_config(repo, "c1").cmd == ()
