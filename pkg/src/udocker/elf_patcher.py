"""Read and rewrite ELF program interpreter and dynamic string entries.

Edits that fit are done in place.  Anything that grows (a longer
interpreter, new dynamic strings, an extra dynamic entry) is written to a
new read/write PT_LOAD segment appended at the end of the file; the program
header slot for it is taken from a PT_NOTE (or PT_NULL) entry so existing
segments never move.

Every change made on behalf of a container goes through a PatchJournal that
keeps the original bytes, so patching can always be undone exactly.
"""

import argparse
import contextlib
import dataclasses
import fcntl
import hashlib
import json
import logging
import os
import stat
import struct
import sys

from .errors import FormatError, IntegrityError, NotElfError, UnsupportedError

log = logging.getLogger(__name__)

ELF_MAGIC = b"\x7fELF"

ET_EXEC, ET_DYN = 2, 3
PT_NULL, PT_LOAD, PT_DYNAMIC, PT_INTERP, PT_NOTE, PT_PHDR = 0, 1, 2, 3, 4, 6
PT_GNU_PROPERTY = 0x6474E553
PF_W, PF_R = 2, 4
DT_NULL, DT_NEEDED, DT_STRTAB, DT_STRSZ, DT_SONAME, DT_RPATH, DT_RUNPATH = 0, 1, 5, 10, 14, 15, 29
PAGE = 0x1000

_FMT = {
    32: dict(ehdr="16sHHIIIIIHHHHHH", phdr="IIIIIIII", shdr="IIIIIIIIII", dyn="iI"),
    64: dict(ehdr="16sHHIQQQIHHHHHH", phdr="IIQQQQQQ", shdr="IIQQQQIIQQ", dyn="qQ"),
}
# field order inside a program header differs between the classes
_PH_FIELDS = {
    32: ("type", "offset", "vaddr", "paddr", "filesz", "memsz", "flags", "align"),
    64: ("type", "flags", "offset", "vaddr", "paddr", "filesz", "memsz", "align"),
}
_SH_FIELDS = ("name", "type", "flags", "addr", "offset", "size", "link", "info", "addralign", "entsize")

# NUL-delimited strings in the dynamic loader that make it look at the host
LOADER_HOST_STRINGS = (
    b"/etc/ld.so.cache",
    b"/etc/ld.so.preload",
    b"/lib/x86_64-linux-gnu/",
    b"/usr/lib/x86_64-linux-gnu/",
    b"/lib/aarch64-linux-gnu/",
    b"/usr/lib/aarch64-linux-gnu/",
    b"/lib64/",
    b"/usr/lib64/",
    b"/lib/",
    b"/usr/lib/",
)

DEFAULT_LIB_DIRS = (
    "/lib/x86_64-linux-gnu",
    "/usr/lib/x86_64-linux-gnu",
    "/lib64",
    "/usr/lib64",
    "/lib",
    "/usr/lib",
    "/usr/local/lib",
)


@dataclasses.dataclass(frozen=True)
class ElfInfo:
    elf_class: int
    interpreter: str | None
    rpath: tuple
    runpath: tuple
    needed: tuple
    is_dynamic: bool
    elf_type: int = 0
    machine: int = 0
    soname: str | None = None


@dataclasses.dataclass
class _Seg:
    type: int
    flags: int
    offset: int
    vaddr: int
    paddr: int
    filesz: int
    memsz: int
    align: int


class _Elf:
    def __init__(self, data, name="?"):
        self.data = data
        self.name = name
        if len(data) < 16 or data[:4] != ELF_MAGIC:
            raise NotElfError("%s: not an ELF file" % name)
        cls = data[4]
        if cls not in (1, 2):
            raise FormatError("%s: bad ELF class %d" % (name, cls))
        self.cls = 32 if cls == 1 else 64
        self.end = "<" if data[5] == 1 else ">"
        fmt = _FMT[self.cls]
        self.f_ehdr = struct.Struct(self.end + fmt["ehdr"])
        self.f_phdr = struct.Struct(self.end + fmt["phdr"])
        self.f_shdr = struct.Struct(self.end + fmt["shdr"])
        self.f_dyn = struct.Struct(self.end + fmt["dyn"])
        try:
            (_, self.e_type, self.e_machine, _, _, self.e_phoff, self.e_shoff, _, _,
             self.e_phentsize, self.e_phnum, self.e_shentsize, self.e_shnum, self.e_shstrndx) = \
                self.f_ehdr.unpack_from(data, 0)
            self.phdrs = [self._read_phdr(i) for i in range(self.e_phnum)]
        except struct.error as exc:
            raise FormatError("%s: truncated ELF header" % name) from exc
        for ph in self.phdrs:
            if ph.type in (PT_INTERP, PT_DYNAMIC) and ph.offset + ph.filesz > len(data):
                raise FormatError("%s: truncated ELF file" % name)
        self.shdrs = []
        if self.e_shoff and self.e_shentsize == self.f_shdr.size:
            if self.e_shoff + self.e_shnum * self.e_shentsize <= len(data):
                self.shdrs = [
                    dict(zip(_SH_FIELDS, self.f_shdr.unpack_from(data, self.e_shoff + i * self.e_shentsize)))
                    for i in range(self.e_shnum)
                ]

    def _read_phdr(self, i):
        vals = self.f_phdr.unpack_from(self.data, self.e_phoff + i * self.e_phentsize)
        return _Seg(**dict(zip(_PH_FIELDS[self.cls], vals)))

    def write_phdrs(self):
        for i, ph in enumerate(self.phdrs):
            vals = [getattr(ph, f) for f in _PH_FIELDS[self.cls]]
            self.f_phdr.pack_into(self.data, self.e_phoff + i * self.e_phentsize, *vals)

    def write_shdr(self, index):
        sh = self.shdrs[index]
        self.f_shdr.pack_into(self.data, self.e_shoff + index * self.e_shentsize, *[sh[f] for f in _SH_FIELDS])

    def section_index(self, name):
        if not self.shdrs or self.e_shstrndx >= len(self.shdrs):
            return None
        strtab = self.shdrs[self.e_shstrndx]
        for i, sh in enumerate(self.shdrs):
            start = strtab["offset"] + sh["name"]
            stop = self.data.find(b"\0", start)
            if bytes(self.data[start:stop]) == name:
                return i
        return None

    def segment(self, ptype):
        for ph in self.phdrs:
            if ph.type == ptype:
                return ph
        return None

    def vaddr_to_offset(self, addr):
        for ph in self.phdrs:
            if ph.type == PT_LOAD and ph.vaddr <= addr < ph.vaddr + ph.filesz:
                return ph.offset + addr - ph.vaddr
        raise FormatError("%s: address 0x%x not in any loadable segment" % (self.name, addr))

    def interpreter(self):
        ph = self.segment(PT_INTERP)
        if ph is None:
            return None
        raw = bytes(self.data[ph.offset:ph.offset + ph.filesz])
        return raw.split(b"\0", 1)[0].decode("utf-8", "surrogateescape")

    def dynamic(self):
        """Return (entries up to DT_NULL, total slots)."""
        ph = self.segment(PT_DYNAMIC)
        if ph is None:
            return [], 0
        size = self.f_dyn.size
        slots = ph.filesz // size
        entries = []
        for i in range(slots):
            tag, val = self.f_dyn.unpack_from(self.data, ph.offset + i * size)
            if tag == DT_NULL:
                break
            entries.append([tag, val])
        return entries, slots

    def dynstr(self, entries):
        tags = dict((t, v) for t, v in entries if t in (DT_STRTAB, DT_STRSZ))
        if DT_STRTAB not in tags:
            return None, 0, 0
        off = self.vaddr_to_offset(tags[DT_STRTAB])
        size = tags.get(DT_STRSZ, 0)
        return bytes(self.data[off:off + size]), off, size

    @staticmethod
    def string_at(table, index):
        stop = table.find(b"\0", index)
        return table[index:stop if stop >= 0 else len(table)].decode("utf-8", "surrogateescape")


def _split_path_list(value):
    return tuple(p for p in value.split(":") if p) if value else ()


def _info(elf):
    entries, _ = elf.dynamic()
    needed, rpath, runpath, soname = [], (), (), None
    if entries:
        table, _, _ = elf.dynstr(entries)
        if table is not None:
            for tag, val in entries:
                if tag == DT_NEEDED:
                    needed.append(elf.string_at(table, val))
                elif tag == DT_RPATH:
                    rpath = _split_path_list(elf.string_at(table, val))
                elif tag == DT_RUNPATH:
                    runpath = _split_path_list(elf.string_at(table, val))
                elif tag == DT_SONAME:
                    soname = elf.string_at(table, val)
    interp = elf.interpreter()
    return ElfInfo(
        elf_class=elf.cls,
        interpreter=interp,
        rpath=rpath,
        runpath=runpath,
        needed=tuple(needed),
        is_dynamic=interp is not None or bool(needed),
        elf_type=elf.e_type,
        machine=elf.e_machine,
        soname=soname,
    )


def read_elf_bytes(data, name="?"):
    return _info(_Elf(bytearray(data), name))


def read_elf(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return read_elf_bytes(data, path)


def read_interpreter(path):
    """PT_INTERP of ``path`` reading only the headers; None if static or not ELF."""
    with open(path, "rb") as fh:
        head = fh.read(64)
        if len(head) < 52 or head[:4] != ELF_MAGIC or head[4] not in (1, 2):
            return None
        cls = 32 if head[4] == 1 else 64
        end = "<" if head[5] == 1 else ">"
        fields = struct.unpack_from(end + _FMT[cls]["ehdr"], head.ljust(64, b"\0"))
        phoff, phentsize, phnum = fields[5], fields[9], fields[10]
        fh.seek(phoff)
        table = fh.read(phentsize * phnum)
        fmt = struct.Struct(end + _FMT[cls]["phdr"])
        names = _PH_FIELDS[cls]
        for i in range(phnum):
            if (i + 1) * phentsize > len(table):
                break
            ph = dict(zip(names, fmt.unpack_from(table, i * phentsize)))
            if ph["type"] == PT_INTERP:
                fh.seek(ph["offset"])
                raw = fh.read(ph["filesz"])
                return raw.split(b"\0", 1)[0].decode("utf-8", "surrogateescape") or None
    return None


def is_elf(path):
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == ELF_MAGIC
    except OSError:
        return False


def _align(value, alignment):
    return (value + alignment - 1) // alignment * alignment


class _Growth:
    """Accumulates data destined for the appended segment."""

    def __init__(self, elf):
        self.elf = elf
        loads = [ph for ph in elf.phdrs if ph.type == PT_LOAD]
        if not loads:
            raise UnsupportedError("%s: no loadable segments" % elf.name)
        self.align = max([PAGE] + [ph.align for ph in loads])
        top = max(ph.vaddr + ph.memsz for ph in loads)
        self.offset = _align(len(elf.data), 16)
        self.blob = bytearray()
        # a segment appended by an earlier patch is grown instead of adding another
        last = max(loads, key=lambda ph: ph.vaddr)
        self.extend = None
        if (last.offset + last.filesz == len(elf.data) and last.filesz == last.memsz
                and last.flags == PF_R | PF_W):
            self.extend = last
            self.vaddr = last.vaddr + (self.offset - last.offset)
        else:
            self.vaddr = _align(top, self.align) + self.offset % self.align

    def add(self, data, alignment=8):
        self.blob.extend(b"\0" * (_align(len(self.blob), alignment) - len(self.blob)))
        pos = len(self.blob)
        self.blob.extend(data)
        return self.offset + pos, self.vaddr + pos

    def commit(self):
        if not self.blob:
            return self.elf.data
        elf = self.elf
        if self.extend is not None:
            seg = self.extend
            seg.filesz = seg.memsz = self.offset + len(self.blob) - seg.offset
            elf.write_phdrs()
            out = elf.data
            out.extend(b"\0" * (self.offset - len(out)))
            out.extend(self.blob)
            return out
        slot = None
        prop = elf.segment(PT_GNU_PROPERTY)
        notes = [i for i, ph in enumerate(elf.phdrs) if ph.type == PT_NOTE]
        # prefer the note that only duplicates PT_GNU_PROPERTY
        for i in notes:
            if prop is not None and elf.phdrs[i].offset == prop.offset:
                slot = i
        if slot is None and notes:
            slot = notes[-1]
        if slot is None:
            nulls = [i for i, ph in enumerate(elf.phdrs) if ph.type == PT_NULL]
            slot = nulls[0] if nulls else None
        if slot is None:
            raise UnsupportedError("%s: no free program header slot to add a segment" % elf.name)
        new = _Seg(PT_LOAD, PF_R | PF_W, self.offset, self.vaddr, self.vaddr, len(self.blob), len(self.blob), self.align)
        phdrs = [ph for i, ph in enumerate(elf.phdrs) if i != slot]
        # loaders expect PT_LOAD entries sorted by address: insert after the last one
        last_load = max(i for i, ph in enumerate(phdrs) if ph.type == PT_LOAD)
        phdrs.insert(last_load + 1, new)
        elf.phdrs = phdrs
        elf.write_phdrs()
        out = elf.data
        out.extend(b"\0" * (self.offset - len(out)))
        out.extend(self.blob)
        return out


def patch_bytes(data, interpreter=None, runpath=None, needed=None, runpath_tag=None, name="?"):
    """Return a patched copy of the ELF image ``data``.

    ``runpath`` is a list of directories; it updates DT_RUNPATH, or DT_RPATH
    when only that one exists, or adds DT_RUNPATH.  ``needed`` maps old
    DT_NEEDED names to new ones.
    """
    elf = _Elf(bytearray(data), name)
    info = _info(elf)
    if not info.is_dynamic and elf.segment(PT_DYNAMIC) is None:
        raise UnsupportedError("%s: statically linked, nothing to patch" % name)
    grow = _Growth(elf)
    entries, slots = elf.dynamic()
    dyn_ph = elf.segment(PT_DYNAMIC)
    strings = []
    assign = []  # (entry, string) pairs resolved once the new table exists

    for entry in entries:
        if needed and entry[0] == DT_NEEDED:
            table, _, _ = elf.dynstr(entries)
            old = elf.string_at(table, entry[1])
            if old in needed and needed[old] != old:
                strings.append(needed[old])
                assign.append((entry, needed[old]))
    if needed:
        present = set(info.needed)
        for old in needed:
            if old not in present:
                log.warning("%s: %s is not a needed library, rename ignored", name, old)

    added = None
    if runpath is not None:
        value = ":".join(runpath)
        tag = runpath_tag
        if tag is None:
            tags = {e[0] for e in entries}
            tag = DT_RUNPATH if DT_RUNPATH in tags or DT_RPATH not in tags else DT_RPATH
        current = info.runpath if tag == DT_RUNPATH else info.rpath
        if tuple(runpath) != tuple(current):
            strings.append(value)
            target = next((e for e in entries if e[0] == tag), None)
            if target is None:
                target = added = [tag, 0]
            assign.append((target, value))

    if strings:
        table, _, _ = elf.dynstr(entries)
        if table is None:
            raise UnsupportedError("%s: no dynamic string table" % name)
        newtab = bytearray(table)
        index = {}
        for s in strings:
            if s not in index:
                index[s] = len(newtab)
                newtab.extend(s.encode("utf-8", "surrogateescape") + b"\0")
        off, addr = grow.add(bytes(newtab))
        for entry in entries:
            if entry[0] == DT_STRTAB:
                entry[1] = addr
            elif entry[0] == DT_STRSZ:
                entry[1] = len(newtab)
        for entry, s in assign:
            entry[1] = index[s]
        sec = elf.section_index(b".dynstr")
        if sec is not None:
            elf.shdrs[sec].update(offset=off, addr=addr, size=len(newtab))
            elf.write_shdr(sec)

    if added is not None:
        entries.append(added)
    if strings or added is not None:
        size = elf.f_dyn.size
        if len(entries) + 1 <= slots:
            # fits: rewrite in place, padding with DT_NULL
            for i in range(slots):
                tag, val = entries[i] if i < len(entries) else (DT_NULL, 0)
                elf.f_dyn.pack_into(elf.data, dyn_ph.offset + i * size, tag, val)
        else:
            blob = bytearray()
            for tag, val in entries + [[DT_NULL, 0], [DT_NULL, 0]]:
                blob.extend(elf.f_dyn.pack(tag, val))
            off, addr = grow.add(bytes(blob))
            dyn_ph.offset, dyn_ph.vaddr, dyn_ph.paddr = off, addr, addr
            dyn_ph.filesz = dyn_ph.memsz = len(blob)
            sec = elf.section_index(b".dynamic")
            if sec is not None:
                elf.shdrs[sec].update(offset=off, addr=addr, size=len(blob))
                elf.write_shdr(sec)

    if interpreter is not None and interpreter != info.interpreter:
        ph = elf.segment(PT_INTERP)
        if ph is None:
            raise UnsupportedError("%s: no program interpreter to replace" % name)
        raw = interpreter.encode("utf-8", "surrogateescape") + b"\0"
        if len(raw) <= ph.filesz:
            elf.data[ph.offset:ph.offset + ph.filesz] = raw.ljust(ph.filesz, b"\0")
        else:
            off, addr = grow.add(raw, 1)
            ph.offset, ph.vaddr, ph.paddr = off, addr, addr
            ph.filesz = ph.memsz = len(raw)
            sec = elf.section_index(b".interp")
            if sec is not None:
                elf.shdrs[sec].update(offset=off, addr=addr, size=len(raw))
                elf.write_shdr(sec)

    elf.write_phdrs()
    return bytes(grow.commit())


def loader_edits(data, strings=LOADER_HOST_STRINGS):
    """Disable host search locations compiled into a dynamic loader.

    Each listed string that appears as a whole NUL-delimited string keeps
    its leading and trailing slash (the loader asserts on those) and has
    every other byte replaced by 0x01, which names nothing on the host.
    """
    out = bytearray(data)
    count = 0
    for s in strings:
        needle = b"\0" + s + b"\0"
        keep_tail = s.endswith(b"/")
        blank = b"/" + b"\x01" * (len(s) - 1 - keep_tail) + (b"/" if keep_tail else b"")
        start = 0
        while True:
            pos = out.find(needle, start)
            if pos < 0:
                break
            out[pos + 1:pos + 1 + len(s)] = blank
            count += 1
            start = pos + 1
    return bytes(out), count


# -- journal ---------------------------------------------------------------

JOURNAL_MAGIC = b"UDPJ"
JOURNAL_VERSION = 1
_JHDR = struct.Struct("<4sHH")
_JREC = struct.Struct("<I")
BLOCK = 4096


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def changed_ranges(old, new):
    """Byte ranges (offset, length) inside ``old`` that differ in ``new``."""
    ranges = []
    limit = min(len(old), len(new))
    for start in range(0, limit, BLOCK):
        stop = min(start + BLOCK, limit)
        if old[start:stop] != new[start:stop]:
            if ranges and ranges[-1][0] + ranges[-1][1] == start:
                ranges[-1][1] += stop - start
            else:
                ranges.append([start, stop - start])
    return ranges


@dataclasses.dataclass
class JournalEntry:
    kind: str  # "meta", "patch", "create" or "commit"
    path: str = ""
    size: int = 0
    before: str = ""
    after: str = ""
    mtime_ns: int = 0
    ranges: list = dataclasses.field(default_factory=list)
    chunks: list = dataclasses.field(default_factory=list)
    extra: dict = dataclasses.field(default_factory=dict)


class PatchJournal:
    """Append-only log of original file bytes, stored in the container dir.

    Layout: a header (magic, version), then records of
    ``<u32 length><JSON description><raw original bytes of each range>``.
    Paths are relative to the container directory so the container can be
    moved.
    """

    def __init__(self, container_dir):
        self.container_dir = os.path.abspath(container_dir)
        self.path = os.path.join(self.container_dir, "patch.journal")
        self.lock_path = os.path.join(self.container_dir, ".patch.lock")

    @contextlib.contextmanager
    def lock(self):
        fd = os.open(self.lock_path, os.O_RDWR | os.O_CREAT | os.O_CLOEXEC, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            yield self
        finally:
            os.close(fd)

    def _rel(self, path):
        return os.path.relpath(os.path.abspath(path), self.container_dir)

    def _abs(self, rel):
        return os.path.normpath(os.path.join(self.container_dir, rel))

    def entries(self):
        try:
            with open(self.path, "rb") as fh:
                data = fh.read()
        except FileNotFoundError:
            return []
        if len(data) < _JHDR.size:
            return []
        magic, version, _ = _JHDR.unpack_from(data, 0)
        if magic != JOURNAL_MAGIC or version != JOURNAL_VERSION:
            raise FormatError("%s: not a version %d patch journal" % (self.path, JOURNAL_VERSION))
        pos = _JHDR.size
        out = []
        while pos + _JREC.size <= len(data):
            (hlen,) = _JREC.unpack_from(data, pos)
            pos += _JREC.size
            if pos + hlen > len(data):
                log.warning("%s: truncated journal record ignored", self.path)
                break
            doc = json.loads(data[pos:pos + hlen])
            pos += hlen
            chunks = []
            for _, length in doc.get("ranges", []):
                chunks.append(data[pos:pos + length])
                pos += length
            if any(len(c) != l for c, (_, l) in zip(chunks, doc.get("ranges", []))):
                log.warning("%s: truncated journal record ignored", self.path)
                break
            extra = doc.pop("extra", {})
            out.append(JournalEntry(chunks=chunks, extra=extra, **doc))
        return out

    def _append(self, entry):
        doc = dataclasses.asdict(entry)
        chunks = doc.pop("chunks")
        if not doc["extra"]:
            doc.pop("extra")
        header = json.dumps(doc, sort_keys=True).encode()
        new = not os.path.exists(self.path)
        with open(self.path, "ab") as fh:
            if new:
                fh.write(_JHDR.pack(JOURNAL_MAGIC, JOURNAL_VERSION, 0))
            fh.write(_JREC.pack(len(header)))
            fh.write(header)
            for c in chunks:
                fh.write(c)
            fh.flush()
            os.fsync(fh.fileno())

    def meta(self):
        for e in self.entries():
            if e.kind == "meta":
                return e.extra
        return None

    def committed(self):
        return any(e.kind == "commit" for e in self.entries())

    def patched_paths(self):
        return {self._abs(e.path) for e in self.entries() if e.kind in ("patch", "create")}

    def record_meta(self, **extra):
        self._append(JournalEntry("meta", extra=extra))

    def record_commit(self):
        self._append(JournalEntry("commit"))

    def write_file(self, path, new):
        """Journal the original content of ``path`` and write ``new`` in place."""
        with open(path, "rb") as fh:
            old = fh.read()
        if new == old:
            return False
        st = os.stat(path)
        ranges = changed_ranges(old, new)
        self._append(JournalEntry(
            "patch",
            path=self._rel(path),
            size=len(old),
            before=sha256_bytes(old),
            after=sha256_bytes(new),
            mtime_ns=st.st_mtime_ns,
            ranges=ranges,
            chunks=[old[o:o + l] for o, l in ranges],
        ))
        _write_ranges(path, new, ranges, len(old))
        os.utime(path, ns=(st.st_atime_ns, st.st_mtime_ns))
        return True

    def create_file(self, path, data, mode=0o755):
        """Create a file that revert will delete."""
        self._append(JournalEntry("create", path=self._rel(path), after=sha256_bytes(data)))
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, mode)
        os.rename(tmp, path)

    def revert(self):
        """Undo every journaled change, newest first; returns restored paths."""
        restored = []
        for entry in reversed(self.entries()):
            if entry.kind == "create":
                path = self._abs(entry.path)
                with contextlib.suppress(FileNotFoundError):
                    os.unlink(path)
                restored.append(path)
            elif entry.kind == "patch":
                path = self._abs(entry.path)
                if _restore(path, entry):
                    restored.append(path)
        with contextlib.suppress(FileNotFoundError):
            os.unlink(self.path)
        return list(dict.fromkeys(restored))


def _write_ranges(path, new, ranges, old_size):
    with open(path, "r+b") as fh:
        for off, length in ranges:
            fh.seek(off)
            fh.write(new[off:off + length])
        if len(new) > old_size:
            fh.seek(old_size)
            fh.write(new[old_size:])
        fh.truncate(len(new))


def _restore(path, entry):
    try:
        with open(path, "rb") as fh:
            current = fh.read()
    except FileNotFoundError:
        log.warning("journaled file %s vanished, cannot restore", path)
        return False
    digest = sha256_bytes(current)
    if digest == entry.before:
        return False
    if digest != entry.after:
        log.warning("%s was modified after patching; left as is", path)
        return False
    st = os.stat(path)
    with open(path, "r+b") as fh:
        fh.truncate(entry.size)
        for (off, _), chunk in zip(entry.ranges, entry.chunks):
            fh.seek(off)
            fh.write(chunk)
    with open(path, "rb") as fh:
        if sha256_bytes(fh.read()) != entry.before:
            raise IntegrityError("%s: content differs from journal after revert" % path)
    os.utime(path, ns=(st.st_atime_ns, entry.mtime_ns))
    return True


# -- single file edits -------------------------------------------------------

def _patch_file(path, journal=None, **edits):
    with open(path, "rb") as fh:
        old = fh.read()
    new = patch_bytes(old, name=path, **edits)
    if new == old:
        return False
    if journal is not None:
        return journal.write_file(path, new)
    st = os.stat(path)
    _write_ranges(path, new, changed_ranges(old, new), len(old))
    os.utime(path, ns=(st.st_atime_ns, st.st_mtime_ns))
    return True


def set_interpreter(path, new_interp, journal=None):
    info = read_elf(path)
    if info.interpreter is None:
        raise UnsupportedError("%s: statically linked or no interpreter" % path)
    return _patch_file(path, journal, interpreter=new_interp)


def set_rpath(path, paths, journal=None, tag=None):
    if not read_elf(path).is_dynamic:
        raise UnsupportedError("%s: not a dynamic ELF" % path)
    return _patch_file(path, journal, runpath=list(paths), runpath_tag=tag)


def set_needed(path, renames, journal=None):
    if not renames:
        return False
    if not read_elf(path).is_dynamic:
        raise UnsupportedError("%s: not a dynamic ELF" % path)
    return _patch_file(path, journal, needed=dict(renames))


# -- container plans -------------------------------------------------------

@dataclasses.dataclass
class ElfPatchPlan:
    rootfs: str
    mode: str
    entries: list = dataclasses.field(default_factory=list)  # (file, before, after)
    journal: PatchJournal = None


def prefixed_search_path(pathmap, info=None, extra_dirs=()):
    """Host locations for the runpath of a patched container binary."""
    wanted = []
    if info is not None:
        wanted.extend(info.rpath + info.runpath)
    wanted.extend(extra_dirs)
    wanted.extend(DEFAULT_LIB_DIRS)
    out = []
    for d in wanted:
        if d.startswith("$ORIGIN") or d.startswith("${ORIGIN}"):
            host = d
        elif d.startswith("/"):
            host = pathmap.to_host(d)
            if not os.path.isdir(host):
                continue
        else:
            continue
        if host not in out:
            out.append(host)
    return out


def patch_executable(path, pathmap, loader_host, journal, extra_dirs=()):
    """Point one container binary at the container loader and libraries."""
    info = read_elf(path)
    edits = {"runpath": prefixed_search_path(pathmap, info, extra_dirs)}
    if info.interpreter is not None:
        edits["interpreter"] = loader_host
    renames = {n: pathmap.to_host(n) for n in info.needed if n.startswith("/")}
    if renames:
        edits["needed"] = renames
    with open(path, "rb") as fh:
        old = fh.read()
    new = patch_bytes(old, name=path, **edits)
    journal.write_file(path, new)
    return info, read_elf_bytes(new, path)


def patch_loader(path, journal):
    with open(path, "rb") as fh:
        old = fh.read()
    new, count = loader_edits(old)
    if count == 0:
        log.warning("%s: no host search strings found in loader", path)
    journal.write_file(path, new)
    return count


def _scan(rootfs):
    seen = set()
    for dirpath, dirnames, filenames in os.walk(rootfs):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            try:
                st = os.lstat(path)
            except OSError:
                continue
            if not stat.S_ISREG(st.st_mode) or st.st_size < 64:
                continue
            key = (st.st_dev, st.st_ino)
            if key in seen:
                continue
            seen.add(key)
            if is_elf(path):
                yield path, st


def plan_and_apply(rootfs, mode, loader, pathmap=None, container_dir=None, extra_dirs=()):
    """Patch a container for loader mode F3 (everything now) or F4 (loader only).

    ``loader`` is the container path of the dynamic loader.  Re-applying
    with an unchanged rootfs location is a no-op; if the container moved,
    the previous patches are reverted and redone.
    """
    from .pathmap import PathMap

    rootfs = os.path.realpath(rootfs)
    container_dir = container_dir or os.path.dirname(rootfs)
    pathmap = pathmap or PathMap(rootfs, sysdirs=())
    loader_host = pathmap.to_host(loader)
    if not os.path.isfile(loader_host):
        raise FileNotFoundError("container loader %s not found" % loader)
    journal = PatchJournal(container_dir)
    plan = ElfPatchPlan(rootfs, mode, journal=journal)
    with journal.lock():
        meta = journal.meta()
        if meta and journal.committed() and meta.get("rootfs") == rootfs and meta.get("mode") == mode:
            log.debug("%s already patched for %s", rootfs, mode)
            return plan
        if journal.entries():
            journal.revert()
        journal.record_meta(rootfs=rootfs, mode=mode, loader=loader, loader_host=loader_host, extra_dirs=list(extra_dirs))
        loader_st = os.stat(loader_host)
        before = read_elf(loader_host)
        patch_loader(loader_host, journal)
        plan.entries.append((loader_host, before, read_elf(loader_host)))
        if mode == "F3":
            machine = before.machine
            for path, st in _scan(rootfs):
                if (st.st_dev, st.st_ino) == (loader_st.st_dev, loader_st.st_ino):
                    continue
                try:
                    info = read_elf(path)
                except FormatError as exc:
                    log.warning("skipping %s: %s", path, exc)
                    continue
                if info.machine != machine:
                    log.warning("skipping foreign-architecture binary %s", path)
                    continue
                if not info.is_dynamic:
                    continue
                if info.interpreter is None and info.elf_type != ET_DYN:
                    continue
                try:
                    plan.entries.append((path,) + patch_executable(path, pathmap, loader_host, journal, extra_dirs))
                except (UnsupportedError, FormatError) as exc:
                    log.warning("cannot patch %s: %s", path, exc)
        journal.record_commit()
    return plan


def patch_on_demand(container_dir, path):
    """Patch one executable of an F4 container unless already handled.

    Returns 0 when the file is ready to run, 3 for a static binary.
    """
    from .pathmap import PathMap

    journal = PatchJournal(container_dir)
    with journal.lock():
        meta = journal.meta() or {}
        if meta.get("mode") != "F4":
            raise UnsupportedError("container is not prepared for on-demand patching")
        path = os.path.realpath(path)
        if path in journal.patched_paths():
            return 0
        info = read_elf(path)
        if not info.is_dynamic:
            return 3
        if info.interpreter == meta["loader_host"]:
            return 0
        pathmap = PathMap(meta["rootfs"], sysdirs=())
        patch_executable(path, pathmap, meta["loader_host"], journal, meta.get("extra_dirs", ()))
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="python -m udocker.elf_patcher")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("info", help="print ELF interpreter and dynamic entries")
    p.add_argument("file")
    p = sub.add_parser("patch-exec", help="on-demand patch of one container executable")
    p.add_argument("container_dir")
    p.add_argument("file")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="udocker: %(message)s")
    try:
        if args.cmd == "info":
            print(json.dumps(dataclasses.asdict(read_elf(args.file))))
            return 0
        return patch_on_demand(args.container_dir, args.file)
    except NotElfError:
        return 4
    except (FormatError, UnsupportedError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
