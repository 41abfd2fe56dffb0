"""Docker-like command line front end.

Records go to stdout one per line; diagnostics go to stderr.  Exit codes:
0 success, 1 usage, 2 not found, 3 integrity/format, 4 engine fault,
5 mode unavailable, 6 repository conflict, 7 registry.  ``run`` returns the
exit status of the containerized command when it gets that far.
"""

import argparse
import logging
import os
import sys

from . import __version__, execution, tools
from .errors import ImageNotFoundError, NotFoundError, UdockerError, UsageError
from .metadata import RunOptions, build_exec_spec
from .registry_client import RegistryClient
from .repo_store import ImageRef, LocalRepository, default_root

log = logging.getLogger("udocker")

# verbs allowed before the repository exists
NO_REPO_VERBS = ("install", "version")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError("%s: %s" % (self.prog, message))


def build_parser():
    p = _Parser(prog="udocker", description="run containers without privileges")
    p.add_argument("--repo", default=None, help="repository directory (default $UDOCKER_DIR or ~/.udocker)")
    p.add_argument("-D", "--debug", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("install", help="install engine tools into the repository")
    s.add_argument("--force", action="store_true")
    s.add_argument("--tarball", default=None, help="tools tarball path or URL")
    s.add_argument("--sha256", default=None, help="expected tarball checksum")
    s.set_defaults(func=cmd_install)

    s = sub.add_parser("pull", help="download an image")
    s.add_argument("--insecure", action="store_true", help="plain http, no certificate checks")
    s.add_argument("image")
    s.set_defaults(func=cmd_pull)

    s = sub.add_parser("images", help="list local images")
    s.set_defaults(func=cmd_images)

    s = sub.add_parser("create", help="extract a container from an image")
    s.add_argument("--name", default=None)
    s.add_argument("image")
    s.set_defaults(func=cmd_create)

    s = sub.add_parser("name", help="give a container an alias")
    s.add_argument("container")
    s.add_argument("name")
    s.set_defaults(func=cmd_name)

    s = sub.add_parser("ps", help="list containers")
    s.set_defaults(func=cmd_ps)

    s = sub.add_parser("run", help="execute a command in a container")
    s.add_argument("-v", "--volume", action="append", default=[], dest="volumes", metavar="HOST[:CONT]")
    s.add_argument("-e", "--env", action="append", default=[], metavar="NAME[=VALUE]")
    s.add_argument("--hostenv", action="store_true")
    s.add_argument("--hostauth", action="store_true")
    s.add_argument("--bindhome", action="store_true")
    s.add_argument("-u", "--user", default=None)
    s.add_argument("-w", "--workdir", default=None)
    s.add_argument("--dri", action="store_true")
    s.add_argument("--name", default=None, help="alias for a container created on the fly")
    s.add_argument("container")
    s.add_argument("command", nargs=argparse.REMAINDER)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("setup", help="choose the execution mode of a container")
    s.add_argument("--execmode", default=None, choices=execution.MODES)
    s.add_argument("container")
    s.set_defaults(func=cmd_setup)

    s = sub.add_parser("rm", help="delete containers")
    s.add_argument("containers", nargs="+")
    s.set_defaults(func=cmd_rm)

    s = sub.add_parser("rmi", help="delete an image")
    s.add_argument("image")
    s.set_defaults(func=cmd_rmi)

    s = sub.add_parser("export", help="write a container tree as a tar archive")
    s.add_argument("-o", "--output", default="-")
    s.add_argument("container")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("import", help="create a container from a tar archive")
    s.add_argument("--name", default=None)
    s.add_argument("tarball")
    s.set_defaults(func=cmd_import)

    s = sub.add_parser("version", help="print the version")
    s.set_defaults(func=cmd_version)
    return p


def parse(argv):
    return build_parser().parse_args(argv)


def run_options(ns):
    """Turn parsed ``run`` arguments into RunOptions."""
    return RunOptions(
        argv=list(ns.command),
        volumes=list(ns.volumes),
        env=list(ns.env),
        hostenv=ns.hostenv,
        hostauth=ns.hostauth,
        bindhome=ns.bindhome,
        user=ns.user,
        workdir=ns.workdir,
        dri=ns.dri,
    )


def _out(line):
    sys.stdout.write(line + "\n")


def _repo(ns):
    return LocalRepository(ns.repo or default_root())


def cmd_install(ns):
    done = tools.install(ns.repo, source=ns.tarball, sha256=ns.sha256, force=ns.force)
    _out("installed %s" % tools.TOOLS_VERSION if done else "up-to-date %s" % tools.TOOLS_VERSION)
    return 0


def cmd_version(ns):
    _out("udocker %s" % __version__)
    return 0


def cmd_pull(ns):
    repo = _repo(ns)
    ref = ImageRef.parse(ns.image)
    creds = None
    if os.environ.get("UDOCKER_REGISTRY_USER"):
        creds = (os.environ["UDOCKER_REGISTRY_USER"], os.environ.get("UDOCKER_REGISTRY_PASSWORD", ""))
    res = RegistryClient(repo, insecure=ns.insecure, credentials=creds).pull(ref)
    log.info("%s: %d layers downloaded, %d already present", ref, res.downloaded, res.skipped)
    _out(str(ref))
    return 0


def cmd_images(ns):
    for ref in _repo(ns).list_images():
        _out(str(ref))
    return 0


def cmd_create(ns):
    rec = _repo(ns).create_container(ImageRef.parse(ns.image), ns.name)
    _out(rec.id)
    return 0


def cmd_name(ns):
    repo = _repo(ns)
    repo.set_name(repo.resolve(ns.container), ns.name)
    return 0


def cmd_ps(ns):
    for rec in _repo(ns).list_containers():
        _out("\t".join([
            rec.id,
            rec.exec_mode,
            "R" if rec.protected else "W",
            ",".join(sorted(rec.names)) or "-",
            str(rec.image) if rec.image else "-",
        ]))
    return 0


def _container_for_run(repo, ns):
    try:
        return repo.resolve(ns.container)
    except NotFoundError:
        pass
    # Docker semantics: an image reference creates a fresh container
    try:
        ref = ImageRef.parse(ns.container)
    except UsageError:
        raise NotFoundError("no container or image named %r" % ns.container) from None
    if not repo.has_image(ref):
        raise ImageNotFoundError("no container or local image named %r" % ns.container)
    rec = repo.create_container(ref, ns.name)
    log.info("created container %s from %s", rec.id, ref)
    return rec.id


def cmd_run(ns):
    repo = _repo(ns)
    cid = _container_for_run(repo, ns)
    rec = repo.get_container(cid)
    cfg = execution.image_config(repo, cid)
    spec = build_exec_spec(cfg, run_options(ns), rootfs=rec.rootfs)
    code, _ = execution.run(repo, cid, spec)
    return code


def cmd_setup(ns):
    repo = _repo(ns)
    if ns.execmode is None:
        rec = repo.get_container(ns.container)
        _out("%s\t%s" % (rec.id, rec.exec_mode))
        return 0
    execution.setup(repo, ns.container, ns.execmode)
    return 0


def cmd_rm(ns):
    repo = _repo(ns)
    for name in ns.containers:
        repo.remove_container(name)
    return 0


def cmd_rmi(ns):
    _repo(ns).remove_image(ImageRef.parse(ns.image))
    return 0


def cmd_export(ns):
    repo = _repo(ns)
    if ns.output == "-":
        repo.export_container(ns.container, sys.stdout.buffer)
        sys.stdout.buffer.flush()
    else:
        with open(ns.output, "wb") as fh:
            repo.export_container(ns.container, fh)
    return 0


def cmd_import(ns):
    repo = _repo(ns)
    if ns.tarball == "-":
        rec = repo.import_container(sys.stdin.buffer, ns.name)
    else:
        with open(ns.tarball, "rb") as fh:
            rec = repo.import_container(fh, ns.name)
    _out(rec.id)
    return 0


def _configure_logging(level):
    # own handler: basicConfig is a no-op when a host program already set up logging
    for h in list(log.handlers):
        if getattr(h, "_udocker", False):
            log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    handler._udocker = True
    log.addHandler(handler)
    log.setLevel(level)


def dispatch(argv):
    """Parse ``argv`` and execute the verb; returns the process exit code."""
    try:
        ns = parse(argv)
    except UsageError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return exc.exit_code
    _configure_logging(logging.DEBUG if ns.debug else logging.ERROR if ns.quiet else logging.WARNING)
    try:
        return ns.func(ns)
    except UdockerError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return 1
    except KeyboardInterrupt:
        return 130


def main(argv=None):
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
