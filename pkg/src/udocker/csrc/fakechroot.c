/*
 * Preloadable interposer for the loader based execution modes (F1-F4).
 *
 * Path arguments of the C library path functions are resolved in the
 * container view and replaced by host paths.  The configuration arrives in
 * UDOCKER_FK_* environment variables; they are removed from the process
 * environment at load time and re-attached to the environment of every
 * program executed through the exec wrappers.
 *
 *   UDOCKER_FK_ROOT     host path of the container rootfs
 *   UDOCKER_FK_BINDS    "host<TAB>container" lines, including /dev /proc /sys
 *   UDOCKER_FK_MODE     F1 F2 F3 or F4
 *   UDOCKER_FK_LOADER   host path of the loader used for explicit invocation
 *   UDOCKER_FK_LIBPATH  host library directories appended to LD_LIBRARY_PATH
 *   UDOCKER_FK_ULDPATH  LD_LIBRARY_PATH as set inside the container
 *   UDOCKER_FK_UPRELOAD LD_PRELOAD as set inside the container
 *   UDOCKER_FK_SELF     host path of this shared object
 *   UDOCKER_FK_PATCHER  python interpreter used for on-demand patching (F4)
 *   UDOCKER_FK_PYPATH   PYTHONPATH for the patcher
 *   UDOCKER_FK_CDIR     container directory holding the patch journal
 */
#define _GNU_SOURCE
#include <dirent.h>
#include <dlfcn.h>
#include <errno.h>
#include <fcntl.h>
#include <limits.h>
#include <signal.h>
#include <spawn.h>
#include <stdarg.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/stat.h>
#include <sys/statfs.h>
#include <sys/statvfs.h>
#include <sys/syscall.h>
#include <sys/time.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>
#include <utime.h>

#define FK_PREFIX "UDOCKER_FK_"
#define MAX_BINDS 128
#define MAX_LINKS 40
#define MAX_SHEBANG 4
#define BUF (PATH_MAX * 2)

extern char **environ;

struct bind {
    char *cont;
    size_t clen;
    char *host;
    size_t hlen;
};

static int active;
static char root[PATH_MAX];
static size_t rootlen;
static struct bind binds[MAX_BINDS];
static int nbinds;
static struct bind rev[MAX_BINDS + 1];
static int nrev;
static char mode[8];
static char *loader, *libpath, *self, *patcher, *pypath, *cdir;
static char *saved[32];
static int nsaved;
static int (*real_posix_spawn)(pid_t *, const char *, const posix_spawn_file_actions_t *,
                               const posix_spawnattr_t *, char *const[], char *const[]);

#define REAL(name) real_##name
#define DEF_REAL(ret, name, ...)                                 \
    static ret (*real_##name)(__VA_ARGS__);                      \
    static void load_##name(void) {                              \
        if (!real_##name) real_##name = dlsym(RTLD_NEXT, #name); \
    }
#define LOAD(name) load_##name()

/* -- configuration --------------------------------------------------- */

static char *dupenv(const char *name)
{
    const char *v = getenv(name);
    return v ? strdup(v) : NULL;
}

static int by_clen(const void *a, const void *b)
{
    const struct bind *x = a, *y = b;
    return (int)y->clen - (int)x->clen;
}

static int by_hlen(const void *a, const void *b)
{
    const struct bind *x = a, *y = b;
    return (int)y->hlen - (int)x->hlen;
}

static void add_bind(char *host, char *cont)
{
    int i;
    size_t n = strlen(cont);
    while (n > 1 && cont[n - 1] == '/')
        cont[--n] = 0;
    for (i = 0; i < nbinds; i++)
        if (!strcmp(binds[i].cont, cont))
            return;
    if (nbinds >= MAX_BINDS)
        return;
    binds[nbinds].cont = cont;
    binds[nbinds].clen = n;
    binds[nbinds].host = host;
    binds[nbinds].hlen = strlen(host);
    nbinds++;
}

__attribute__((constructor)) static void fk_init(void)
{
    char *r = getenv("UDOCKER_FK_ROOT");
    char **e;
    int i;
    if (!r || r[0] != '/' || strlen(r) >= PATH_MAX)
        return;
    strcpy(root, r);
    rootlen = strlen(root);
    while (rootlen > 1 && root[rootlen - 1] == '/')
        root[--rootlen] = 0;
    char *b = dupenv("UDOCKER_FK_BINDS");
    if (b) {
        char *save = NULL, *line;
        for (line = strtok_r(b, "\n", &save); line; line = strtok_r(NULL, "\n", &save)) {
            char *tab = strchr(line, '\t');
            if (!tab)
                continue;
            *tab = 0;
            add_bind(line, tab + 1);
        }
    }
    qsort(binds, nbinds, sizeof(binds[0]), by_clen);
    rev[0].host = root;
    rev[0].hlen = rootlen;
    rev[0].cont = "/";
    rev[0].clen = 1;
    for (i = 0; i < nbinds; i++)
        rev[i + 1] = binds[i];
    nrev = nbinds + 1;
    qsort(rev, nrev, sizeof(rev[0]), by_hlen);
    snprintf(mode, sizeof(mode), "%s", getenv("UDOCKER_FK_MODE") ? getenv("UDOCKER_FK_MODE") : "F1");
    loader = dupenv("UDOCKER_FK_LOADER");
    libpath = dupenv("UDOCKER_FK_LIBPATH");
    self = dupenv("UDOCKER_FK_SELF");
    patcher = dupenv("UDOCKER_FK_PATCHER");
    pypath = dupenv("UDOCKER_FK_PYPATH");
    cdir = dupenv("UDOCKER_FK_CDIR");
    real_posix_spawn = dlsym(RTLD_NEXT, "posix_spawn");

    /* keep the control variables for children, then restore the user view */
    for (e = environ; e && *e && nsaved < 30; e++)
        if (!strncmp(*e, FK_PREFIX, strlen(FK_PREFIX)))
            saved[nsaved++] = strdup(*e);
    const char *uld = getenv("UDOCKER_FK_ULDPATH");
    if (uld)
        setenv("LD_LIBRARY_PATH", uld, 1);
    else
        unsetenv("LD_LIBRARY_PATH");
    const char *upre = getenv("UDOCKER_FK_UPRELOAD");
    if (upre)
        setenv("LD_PRELOAD", upre, 1);
    else
        unsetenv("LD_PRELOAD");
    for (i = 0; i < nsaved; i++) {
        char name[64];
        size_t n = strcspn(saved[i], "=");
        if (n < sizeof(name)) {
            memcpy(name, saved[i], n);
            name[n] = 0;
            unsetenv(name);
        }
    }
    active = 1;
}

/* -- translation ------------------------------------------------------ */

/* 1 symlink, 0 directory, -1 missing, 2 anything else */
static int sys_lstat_kind(const char *path)
{
    struct stat st;
    if (syscall(SYS_newfstatat, AT_FDCWD, path, &st, AT_SYMLINK_NOFOLLOW) < 0)
        return -1;
    if (S_ISLNK(st.st_mode))
        return 1;
    return S_ISDIR(st.st_mode) ? 0 : 2;
}

static ssize_t sys_readlink(const char *path, char *buf, size_t size)
{
    return syscall(SYS_readlinkat, AT_FDCWD, path, buf, size);
}

static int lexical_host(const char *cpath, char *out)
{
    int i;
    for (i = 0; i < nbinds; i++) {
        const struct bind *bd = &binds[i];
        const char *rest = NULL;
        if (!strcmp(cpath, bd->cont))
            rest = "";
        else if (bd->clen == 1 && bd->cont[0] == '/')
            rest = cpath + 1;
        else if (!strncmp(cpath, bd->cont, bd->clen) && cpath[bd->clen] == '/')
            rest = cpath + bd->clen + 1;
        if (rest) {
            if (*rest)
                return snprintf(out, PATH_MAX, "%s/%s", bd->host, rest) >= PATH_MAX ? -1 : 0;
            return snprintf(out, PATH_MAX, "%s", bd->host) >= PATH_MAX ? -1 : 0;
        }
    }
    if (!strcmp(cpath, "/"))
        return snprintf(out, PATH_MAX, "%s", root) >= PATH_MAX ? -1 : 0;
    return snprintf(out, PATH_MAX, "%s%s", root, cpath) >= PATH_MAX ? -1 : 0;
}

/* reverse translation of a normalized absolute host path; -1 if outside */
static int to_container(const char *hpath, char *out, size_t size)
{
    int i;
    for (i = 0; i < nrev; i++) {
        const struct bind *bd = &rev[i];
        const char *rest = NULL;
        if (bd->hlen == 1 && bd->host[0] == '/')
            rest = hpath;
        else if (!strcmp(hpath, bd->host))
            rest = "";
        else if (!strncmp(hpath, bd->host, bd->hlen) && hpath[bd->hlen] == '/')
            rest = hpath + bd->hlen;
        if (!rest)
            continue;
        if (!strcmp(bd->cont, "/"))
            return snprintf(out, size, "%s", *rest ? rest : "/") >= (int)size ? -1 : 0;
        return snprintf(out, size, "%s%s", bd->cont, rest) >= (int)size ? -1 : 0;
    }
    return -1;
}

static int all_digits(const char *s, size_t n)
{
    size_t i;
    if (!n)
        return 0;
    for (i = 0; i < n; i++)
        if (s[i] < '0' || s[i] > '9')
            return 0;
    return 1;
}

/* /proc/<pid>[/task/<tid>]/{cwd,root,exe,fd/<n>,map_files/<x>} */
static int proc_magic(const char *p)
{
    const char *s, *t;
    if (strncmp(p, "/proc/", 6))
        return 0;
    s = p + 6;
    t = strchr(s, '/');
    if (!t || !all_digits(s, t - s))
        return 0;
    s = t + 1;
    if (!strncmp(s, "task/", 5)) {
        t = strchr(s + 5, '/');
        if (!t || !all_digits(s + 5, t - s - 5))
            return 0;
        s = t + 1;
    }
    if (!strcmp(s, "cwd") || !strcmp(s, "root") || !strcmp(s, "exe"))
        return 1;
    if (!strncmp(s, "fd/", 3))
        return all_digits(s + 3, strlen(s + 3));
    if (!strncmp(s, "map_files/", 10))
        return s[10] && !strchr(s + 10, '/');
    return 0;
}

static int container_cwd(char *out)
{
    char host[PATH_MAX];
    if (syscall(SYS_getcwd, host, sizeof(host)) < 0 || to_container(host, out, PATH_MAX) < 0) {
        strcpy(out, "/");
        return -1;
    }
    return 0;
}

/*
 * Resolve ``path`` relative to container directory ``base``.  Fills the
 * container path (optional) and host path.  Returns 0 or -1 with errno.
 */
static int resolve(const char *path, const char *base, int follow, char *cout, char *hout)
{
    char rest[BUF], tmp[BUF], res[BUF], target[PATH_MAX];
    size_t rlen = 0;
    int links = 0, trailing;
    size_t plen = strlen(path);

    if (plen >= PATH_MAX) {
        errno = ENAMETOOLONG;
        return -1;
    }
    trailing = plen > 0 && path[plen - 1] == '/' && strspn(path, "/") != plen;
    if (path[0] == '/')
        snprintf(rest, sizeof(rest), "%s", path);
    else
        snprintf(rest, sizeof(rest), "%s/%s", base, path);
    res[0] = 0;
    char *p = rest;
    while (*p) {
        char *comp, *end;
        while (*p == '/')
            p++;
        if (!*p)
            break;
        comp = p;
        end = strchr(p, '/');
        if (end) {
            *end = 0;
            p = end + 1;
        } else {
            p += strlen(p);
        }
        if (!strcmp(comp, "."))
            continue;
        if (!strcmp(comp, "..")) {
            char *slash = strrchr(res, '/');
            if (slash) {
                *slash = 0;
                rlen = slash - res;
            }
            continue;
        }
        size_t clen = strlen(comp);
        if (rlen + clen + 2 >= sizeof(res)) {
            errno = ENAMETOOLONG;
            return -1;
        }
        size_t saved_len = rlen;
        res[rlen++] = '/';
        memcpy(res + rlen, comp, clen + 1);
        rlen += clen;
        /* last component when only slashes and dots remain */
        const char *q = p;
        int last = 1;
        while (*q) {
            while (*q == '/')
                q++;
            if (!*q)
                break;
            const char *e2 = strchr(q, '/');
            size_t n = e2 ? (size_t)(e2 - q) : strlen(q);
            if (!(n == 1 && q[0] == '.')) {
                last = 0;
                break;
            }
            q += n;
        }
        if (last && !follow && !trailing)
            break;
        char h[PATH_MAX];
        if (lexical_host(res, h) < 0) {
            errno = ENAMETOOLONG;
            return -1;
        }
        int kind = sys_lstat_kind(h);
        if (kind != 1) {
            if (last || kind == 0)
                continue;
            /* missing or non-directory in the middle: let the kernel fail
             * on the same component, with ".." neutralized */
            size_t hl = strlen(h);
            for (const char *r = p; *r && hl + 3 < PATH_MAX;) {
                while (*r == '/')
                    r++;
                if (!*r)
                    break;
                const char *e3 = strchr(r, '/');
                size_t n3 = e3 ? (size_t)(e3 - r) : strlen(r);
                int dotdot = n3 == 2 && r[0] == '.' && r[1] == '.';
                if (hl + n3 + 2 >= PATH_MAX) {
                    errno = ENAMETOOLONG;
                    return -1;
                }
                h[hl++] = '/';
                if (dotdot) {
                    h[hl++] = '.';
                } else {
                    memcpy(h + hl, r, n3);
                    hl += n3;
                }
                r += n3;
            }
            h[hl] = 0;
            if (cout)
                snprintf(cout, PATH_MAX, "%s", res);
            snprintf(hout, PATH_MAX, "%s", h);
            return 0;
        }
        ssize_t n = sys_readlink(h, target, sizeof(target) - 1);
        if (n < 0)
            continue;
        target[n] = 0;
        if (++links > MAX_LINKS) {
            errno = ELOOP;
            return -1;
        }
        if (proc_magic(h)) {
            char mapped[PATH_MAX];
            if (target[0] != '/' || to_container(target, mapped, sizeof(mapped)) < 0) {
                if (last) {
                    if (cout)
                        snprintf(cout, PATH_MAX, "%s", res);
                    snprintf(hout, PATH_MAX, "%s", h);
                    return 0;
                }
                errno = ENOENT;
                return -1;
            }
            strcpy(target, mapped);
        }
        res[saved_len] = 0;
        rlen = saved_len;
        if (target[0] == '/') {
            res[0] = 0;
            rlen = 0;
        }
        if (snprintf(tmp, sizeof(tmp), "%s/%s", target, p) >= (int)sizeof(tmp)) {
            errno = ENAMETOOLONG;
            return -1;
        }
        strcpy(rest, tmp);
        p = rest;
    }
    if (!rlen)
        strcpy(res, "/");
    if (lexical_host(res, hout) < 0) {
        errno = ENAMETOOLONG;
        return -1;
    }
    if (trailing) {
        size_t hl = strlen(hout);
        if (hl + 1 < PATH_MAX && hout[hl - 1] != '/')
            strcpy(hout + hl, "/");
    }
    if (cout)
        snprintf(cout, PATH_MAX, "%s", res);
    return 0;
}

static const char *map_path(const char *path, int follow, char *buf)
{
    char cwd[PATH_MAX];
    if (!active || !path || !*path)
        return path;
    if (path[0] != '/')
        container_cwd(cwd);
    if (resolve(path, path[0] == '/' ? "/" : cwd, follow, NULL, buf) < 0)
        return NULL;
    return buf;
}

static const char *map_at(int dirfd, const char *path, int follow, char *buf)
{
    char base[PATH_MAX], link[64], host[PATH_MAX];
    if (!active || !path || !*path || path[0] == '/' || dirfd == AT_FDCWD)
        return map_path(path, follow, buf);
    snprintf(link, sizeof(link), "/proc/self/fd/%d", dirfd);
    ssize_t n = sys_readlink(link, host, sizeof(host) - 1);
    if (n < 0) {
        errno = EBADF;
        return NULL;
    }
    host[n] = 0;
    if (to_container(host, base, sizeof(base)) < 0) {
        errno = EACCES;
        return NULL;
    }
    if (resolve(path, base, follow, NULL, buf) < 0)
        return NULL;
    return buf;
}

static int open_follows(int flags)
{
    if (flags & O_NOFOLLOW)
        return 0;
    return !((flags & O_CREAT) && (flags & O_EXCL));
}

/* reverse-map the result of readlink on a /proc magic link */
static ssize_t fix_link(const char *hpath, char *buf, size_t size, ssize_t n)
{
    char tmp[PATH_MAX], mapped[PATH_MAX];
    if (n <= 0 || !proc_magic(hpath) || (size_t)n >= sizeof(tmp))
        return n;
    memcpy(tmp, buf, n);
    tmp[n] = 0;
    if (tmp[0] != '/' || to_container(tmp, mapped, sizeof(mapped)) < 0)
        return n;
    size_t m = strlen(mapped);
    if (m > size)
        m = size;
    memcpy(buf, mapped, m);
    return m;
}

/* -- simple path wrappers --------------------------------------------- */

#define MAP_OR_FAIL(var, expr, fail) \
    char var##_buf[PATH_MAX];         \
    const char *var = (expr);         \
    if (!var)                          \
        return fail;

#define MAP(var, p, follow) MAP_OR_FAIL(var, map_path(p, follow, var##_buf), -1)
#define MAPAT(var, fd, p, follow) MAP_OR_FAIL(var, map_at(fd, p, follow, var##_buf), -1)

DEF_REAL(int, open, const char *, int, ...)
int open(const char *path, int flags, ...)
{
    mode_t m = 0;
    if (flags & (O_CREAT | O_TMPFILE)) {
        va_list ap;
        va_start(ap, flags);
        m = va_arg(ap, int);
        va_end(ap);
    }
    LOAD(open);
    MAP(h, path, open_follows(flags));
    return REAL(open)(h, flags, m);
}

DEF_REAL(int, open64, const char *, int, ...)
int open64(const char *path, int flags, ...)
{
    mode_t m = 0;
    if (flags & (O_CREAT | O_TMPFILE)) {
        va_list ap;
        va_start(ap, flags);
        m = va_arg(ap, int);
        va_end(ap);
    }
    LOAD(open64);
    MAP(h, path, open_follows(flags));
    return REAL(open64)(h, flags, m);
}

DEF_REAL(int, __open_2, const char *, int)
int __open_2(const char *path, int flags)
{
    LOAD(__open_2);
    MAP(h, path, open_follows(flags));
    return REAL(__open_2)(h, flags);
}

DEF_REAL(int, __open64_2, const char *, int)
int __open64_2(const char *path, int flags)
{
    LOAD(__open64_2);
    MAP(h, path, open_follows(flags));
    return REAL(__open64_2)(h, flags);
}

DEF_REAL(int, openat, int, const char *, int, ...)
int openat(int dirfd, const char *path, int flags, ...)
{
    mode_t m = 0;
    if (flags & (O_CREAT | O_TMPFILE)) {
        va_list ap;
        va_start(ap, flags);
        m = va_arg(ap, int);
        va_end(ap);
    }
    LOAD(openat);
    MAPAT(h, dirfd, path, open_follows(flags));
    return REAL(openat)(h == path ? dirfd : AT_FDCWD, h, flags, m);
}

DEF_REAL(int, openat64, int, const char *, int, ...)
int openat64(int dirfd, const char *path, int flags, ...)
{
    mode_t m = 0;
    if (flags & (O_CREAT | O_TMPFILE)) {
        va_list ap;
        va_start(ap, flags);
        m = va_arg(ap, int);
        va_end(ap);
    }
    LOAD(openat64);
    MAPAT(h, dirfd, path, open_follows(flags));
    return REAL(openat64)(h == path ? dirfd : AT_FDCWD, h, flags, m);
}

DEF_REAL(int, __openat_2, int, const char *, int)
int __openat_2(int dirfd, const char *path, int flags)
{
    LOAD(__openat_2);
    MAPAT(h, dirfd, path, open_follows(flags));
    return REAL(__openat_2)(h == path ? dirfd : AT_FDCWD, h, flags);
}

DEF_REAL(int, __openat64_2, int, const char *, int)
int __openat64_2(int dirfd, const char *path, int flags)
{
    LOAD(__openat64_2);
    MAPAT(h, dirfd, path, open_follows(flags));
    return REAL(__openat64_2)(h == path ? dirfd : AT_FDCWD, h, flags);
}

DEF_REAL(int, creat, const char *, mode_t)
int creat(const char *path, mode_t m)
{
    LOAD(creat);
    MAP(h, path, 1);
    return REAL(creat)(h, m);
}

DEF_REAL(int, creat64, const char *, mode_t)
int creat64(const char *path, mode_t m)
{
    LOAD(creat64);
    MAP(h, path, 1);
    return REAL(creat64)(h, m);
}

DEF_REAL(FILE *, fopen, const char *, const char *)
FILE *fopen(const char *path, const char *m)
{
    LOAD(fopen);
    MAP_OR_FAIL(h, map_path(path, 1, h_buf), NULL);
    return REAL(fopen)(h, m);
}

DEF_REAL(FILE *, fopen64, const char *, const char *)
FILE *fopen64(const char *path, const char *m)
{
    LOAD(fopen64);
    MAP_OR_FAIL(h, map_path(path, 1, h_buf), NULL);
    return REAL(fopen64)(h, m);
}

DEF_REAL(FILE *, freopen, const char *, const char *, FILE *)
FILE *freopen(const char *path, const char *m, FILE *f)
{
    LOAD(freopen);
    MAP_OR_FAIL(h, map_path(path, 1, h_buf), NULL);
    return REAL(freopen)(h, m, f);
}

DEF_REAL(FILE *, freopen64, const char *, const char *, FILE *)
FILE *freopen64(const char *path, const char *m, FILE *f)
{
    LOAD(freopen64);
    MAP_OR_FAIL(h, map_path(path, 1, h_buf), NULL);
    return REAL(freopen64)(h, m, f);
}

DEF_REAL(DIR *, opendir, const char *)
DIR *opendir(const char *path)
{
    LOAD(opendir);
    MAP_OR_FAIL(h, map_path(path, 1, h_buf), NULL);
    return REAL(opendir)(h);
}

#define STAT_WRAPPER(name, follow)                        \
    DEF_REAL(int, name, const char *, struct stat *)      \
    int name(const char *path, struct stat *st)           \
    {                                                     \
        LOAD(name);                                       \
        MAP(h, path, follow);                             \
        return REAL(name)(h, st);                         \
    }

STAT_WRAPPER(stat, 1)
STAT_WRAPPER(lstat, 0)

DEF_REAL(int, stat64, const char *, struct stat64 *)
int stat64(const char *path, struct stat64 *st)
{
    LOAD(stat64);
    MAP(h, path, 1);
    return REAL(stat64)(h, st);
}

DEF_REAL(int, lstat64, const char *, struct stat64 *)
int lstat64(const char *path, struct stat64 *st)
{
    LOAD(lstat64);
    MAP(h, path, 0);
    return REAL(lstat64)(h, st);
}

DEF_REAL(int, fstatat, int, const char *, struct stat *, int)
int fstatat(int dirfd, const char *path, struct stat *st, int flags)
{
    LOAD(fstatat);
    if ((flags & AT_EMPTY_PATH) && path && !*path)
        return REAL(fstatat)(dirfd, path, st, flags);
    MAPAT(h, dirfd, path, !(flags & AT_SYMLINK_NOFOLLOW));
    return REAL(fstatat)(h == path ? dirfd : AT_FDCWD, h, st, flags);
}

DEF_REAL(int, fstatat64, int, const char *, struct stat64 *, int)
int fstatat64(int dirfd, const char *path, struct stat64 *st, int flags)
{
    LOAD(fstatat64);
    if ((flags & AT_EMPTY_PATH) && path && !*path)
        return REAL(fstatat64)(dirfd, path, st, flags);
    MAPAT(h, dirfd, path, !(flags & AT_SYMLINK_NOFOLLOW));
    return REAL(fstatat64)(h == path ? dirfd : AT_FDCWD, h, st, flags);
}

/* pre-2.33 binaries call the versioned stat entry points */
int __xstat(int ver, const char *path, struct stat *st);
int __lxstat(int ver, const char *path, struct stat *st);
int __xstat64(int ver, const char *path, struct stat64 *st);
int __lxstat64(int ver, const char *path, struct stat64 *st);
int __fxstatat(int ver, int dirfd, const char *path, struct stat *st, int flags);
int __fxstatat64(int ver, int dirfd, const char *path, struct stat64 *st, int flags);

DEF_REAL(int, __xstat, int, const char *, struct stat *)
int __xstat(int ver, const char *path, struct stat *st)
{
    LOAD(__xstat);
    MAP(h, path, 1);
    return REAL(__xstat)(ver, h, st);
}

DEF_REAL(int, __lxstat, int, const char *, struct stat *)
int __lxstat(int ver, const char *path, struct stat *st)
{
    LOAD(__lxstat);
    MAP(h, path, 0);
    return REAL(__lxstat)(ver, h, st);
}

DEF_REAL(int, __xstat64, int, const char *, struct stat64 *)
int __xstat64(int ver, const char *path, struct stat64 *st)
{
    LOAD(__xstat64);
    MAP(h, path, 1);
    return REAL(__xstat64)(ver, h, st);
}

DEF_REAL(int, __lxstat64, int, const char *, struct stat64 *)
int __lxstat64(int ver, const char *path, struct stat64 *st)
{
    LOAD(__lxstat64);
    MAP(h, path, 0);
    return REAL(__lxstat64)(ver, h, st);
}

DEF_REAL(int, __fxstatat, int, int, const char *, struct stat *, int)
int __fxstatat(int ver, int dirfd, const char *path, struct stat *st, int flags)
{
    LOAD(__fxstatat);
    MAPAT(h, dirfd, path, !(flags & AT_SYMLINK_NOFOLLOW));
    return REAL(__fxstatat)(ver, h == path ? dirfd : AT_FDCWD, h, st, flags);
}

DEF_REAL(int, __fxstatat64, int, int, const char *, struct stat64 *, int)
int __fxstatat64(int ver, int dirfd, const char *path, struct stat64 *st, int flags)
{
    LOAD(__fxstatat64);
    MAPAT(h, dirfd, path, !(flags & AT_SYMLINK_NOFOLLOW));
    return REAL(__fxstatat64)(ver, h == path ? dirfd : AT_FDCWD, h, st, flags);
}

DEF_REAL(int, statx, int, const char *, int, unsigned int, struct statx *)
int statx(int dirfd, const char *path, int flags, unsigned int mask, struct statx *st)
{
    LOAD(statx);
    if ((flags & AT_EMPTY_PATH) && path && !*path)
        return REAL(statx)(dirfd, path, flags, mask, st);
    MAPAT(h, dirfd, path, !(flags & AT_SYMLINK_NOFOLLOW));
    return REAL(statx)(h == path ? dirfd : AT_FDCWD, h, flags, mask, st);
}

DEF_REAL(int, statfs, const char *, struct statfs *)
int statfs(const char *path, struct statfs *st)
{
    LOAD(statfs);
    MAP(h, path, 1);
    return REAL(statfs)(h, st);
}

DEF_REAL(int, statvfs, const char *, struct statvfs *)
int statvfs(const char *path, struct statvfs *st)
{
    LOAD(statvfs);
    MAP(h, path, 1);
    return REAL(statvfs)(h, st);
}

DEF_REAL(int, statvfs64, const char *, struct statvfs64 *)
int statvfs64(const char *path, struct statvfs64 *st)
{
    LOAD(statvfs64);
    MAP(h, path, 1);
    return REAL(statvfs64)(h, st);
}

#define PATH_INT_WRAPPER(name, follow)  \
    DEF_REAL(int, name, const char *, int) \
    int name(const char *path, int arg)  \
    {                                    \
        LOAD(name);                      \
        MAP(h, path, follow);            \
        return REAL(name)(h, arg);       \
    }

PATH_INT_WRAPPER(access, 1)
PATH_INT_WRAPPER(euidaccess, 1)
PATH_INT_WRAPPER(eaccess, 1)

DEF_REAL(int, faccessat, int, const char *, int, int)
int faccessat(int dirfd, const char *path, int m, int flags)
{
    LOAD(faccessat);
    MAPAT(h, dirfd, path, !(flags & AT_SYMLINK_NOFOLLOW));
    return REAL(faccessat)(h == path ? dirfd : AT_FDCWD, h, m, flags);
}

DEF_REAL(int, chdir, const char *)
int chdir(const char *path)
{
    LOAD(chdir);
    MAP(h, path, 1);
    return REAL(chdir)(h);
}

DEF_REAL(char *, getcwd, char *, size_t)
char *getcwd(char *buf, size_t size)
{
    char host[PATH_MAX], cont[PATH_MAX];
    LOAD(getcwd);
    if (!active)
        return REAL(getcwd)(buf, size);
    if (syscall(SYS_getcwd, host, sizeof(host)) < 0)
        return NULL;
    if (to_container(host, cont, sizeof(cont)) < 0) {
        errno = ENOENT;
        return NULL;
    }
    size_t need = strlen(cont) + 1;
    if (!buf) {
        buf = malloc(size > need ? size : need);
        if (!buf)
            return NULL;
        size = size > need ? size : need;
    } else if (size == 0) {
        errno = EINVAL;
        return NULL;
    }
    if (need > size) {
        errno = ERANGE;
        return NULL;
    }
    memcpy(buf, cont, need);
    return buf;
}

char *get_current_dir_name(void)
{
    return getcwd(NULL, 0);
}

DEF_REAL(int, mkdir, const char *, mode_t)
int mkdir(const char *path, mode_t m)
{
    LOAD(mkdir);
    MAP(h, path, 0);
    return REAL(mkdir)(h, m);
}

DEF_REAL(int, mkdirat, int, const char *, mode_t)
int mkdirat(int dirfd, const char *path, mode_t m)
{
    LOAD(mkdirat);
    MAPAT(h, dirfd, path, 0);
    return REAL(mkdirat)(h == path ? dirfd : AT_FDCWD, h, m);
}

#define PATH_ONLY_WRAPPER(name, follow) \
    DEF_REAL(int, name, const char *)   \
    int name(const char *path)          \
    {                                   \
        LOAD(name);                     \
        MAP(h, path, follow);           \
        return REAL(name)(h);           \
    }

PATH_ONLY_WRAPPER(rmdir, 0)
PATH_ONLY_WRAPPER(unlink, 0)
PATH_ONLY_WRAPPER(remove, 0)

DEF_REAL(int, unlinkat, int, const char *, int)
int unlinkat(int dirfd, const char *path, int flags)
{
    LOAD(unlinkat);
    MAPAT(h, dirfd, path, 0);
    return REAL(unlinkat)(h == path ? dirfd : AT_FDCWD, h, flags);
}

#define TWO_PATH_WRAPPER(name, f1, f2)                 \
    DEF_REAL(int, name, const char *, const char *)    \
    int name(const char *a, const char *b)             \
    {                                                  \
        LOAD(name);                                    \
        MAP(ha, a, f1);                                \
        MAP(hb, b, f2);                                \
        return REAL(name)(ha, hb);                     \
    }

TWO_PATH_WRAPPER(rename, 0, 0)
TWO_PATH_WRAPPER(link, 0, 0)

DEF_REAL(int, renameat, int, const char *, int, const char *)
int renameat(int fa, const char *a, int fb, const char *b)
{
    LOAD(renameat);
    MAPAT(ha, fa, a, 0);
    MAPAT(hb, fb, b, 0);
    return REAL(renameat)(ha == a ? fa : AT_FDCWD, ha, hb == b ? fb : AT_FDCWD, hb);
}

DEF_REAL(int, renameat2, int, const char *, int, const char *, unsigned int)
int renameat2(int fa, const char *a, int fb, const char *b, unsigned int flags)
{
    LOAD(renameat2);
    MAPAT(ha, fa, a, 0);
    MAPAT(hb, fb, b, 0);
    return REAL(renameat2)(ha == a ? fa : AT_FDCWD, ha, hb == b ? fb : AT_FDCWD, hb, flags);
}

DEF_REAL(int, linkat, int, const char *, int, const char *, int)
int linkat(int fa, const char *a, int fb, const char *b, int flags)
{
    LOAD(linkat);
    if ((flags & AT_EMPTY_PATH) && a && !*a) {
        MAPAT(hb, fb, b, 0);
        return REAL(linkat)(fa, a, hb == b ? fb : AT_FDCWD, hb, flags);
    }
    MAPAT(ha, fa, a, (flags & AT_SYMLINK_FOLLOW) != 0);
    MAPAT(hb, fb, b, 0);
    return REAL(linkat)(ha == a ? fa : AT_FDCWD, ha, hb == b ? fb : AT_FDCWD, hb, flags);
}

/* the link target is stored verbatim: it is interpreted in the container */
DEF_REAL(int, symlink, const char *, const char *)
int symlink(const char *target, const char *path)
{
    LOAD(symlink);
    MAP(h, path, 0);
    return REAL(symlink)(target, h);
}

DEF_REAL(int, symlinkat, const char *, int, const char *)
int symlinkat(const char *target, int dirfd, const char *path)
{
    LOAD(symlinkat);
    MAPAT(h, dirfd, path, 0);
    return REAL(symlinkat)(target, h == path ? dirfd : AT_FDCWD, h);
}

DEF_REAL(ssize_t, readlink, const char *, char *, size_t)
ssize_t readlink(const char *path, char *buf, size_t size)
{
    LOAD(readlink);
    MAP(h, path, 0);
    return fix_link(h, buf, size, REAL(readlink)(h, buf, size));
}

DEF_REAL(ssize_t, readlinkat, int, const char *, char *, size_t)
ssize_t readlinkat(int dirfd, const char *path, char *buf, size_t size)
{
    LOAD(readlinkat);
    MAPAT(h, dirfd, path, 0);
    return fix_link(h, buf, size, REAL(readlinkat)(h == path ? dirfd : AT_FDCWD, h, buf, size));
}

DEF_REAL(char *, realpath, const char *, char *)
char *realpath(const char *path, char *resolved)
{
    char cwd[PATH_MAX], cont[PATH_MAX], host[PATH_MAX];
    struct stat st;
    LOAD(realpath);
    if (!active)
        return REAL(realpath)(path, resolved);
    if (!path) {
        errno = EINVAL;
        return NULL;
    }
    if (!*path) {
        errno = ENOENT;
        return NULL;
    }
    container_cwd(cwd);
    if (resolve(path, path[0] == '/' ? "/" : cwd, 1, cont, host) < 0)
        return NULL;
    if (syscall(SYS_newfstatat, AT_FDCWD, host, &st, 0) < 0)
        return NULL;
    if (!resolved) {
        resolved = strdup(cont);
        if (!resolved)
            errno = ENOMEM;
        return resolved;
    }
    snprintf(resolved, PATH_MAX, "%s", cont);
    return resolved;
}

char *__realpath_chk(const char *path, char *resolved, size_t resolvedlen)
{
    (void)resolvedlen;
    return realpath(path, resolved);
}

char *canonicalize_file_name(const char *path)
{
    return realpath(path, NULL);
}

#define PATH_MODE_WRAPPER(name, follow, type) \
    DEF_REAL(int, name, const char *, type)   \
    int name(const char *path, type arg)      \
    {                                         \
        LOAD(name);                           \
        MAP(h, path, follow);                 \
        return REAL(name)(h, arg);            \
    }

PATH_MODE_WRAPPER(chmod, 1, mode_t)
PATH_MODE_WRAPPER(mkfifo, 0, mode_t)
PATH_MODE_WRAPPER(truncate, 1, off_t)
PATH_MODE_WRAPPER(truncate64, 1, off64_t)

DEF_REAL(int, fchmodat, int, const char *, mode_t, int)
int fchmodat(int dirfd, const char *path, mode_t m, int flags)
{
    LOAD(fchmodat);
    MAPAT(h, dirfd, path, !(flags & AT_SYMLINK_NOFOLLOW));
    return REAL(fchmodat)(h == path ? dirfd : AT_FDCWD, h, m, flags);
}

DEF_REAL(int, mkfifoat, int, const char *, mode_t)
int mkfifoat(int dirfd, const char *path, mode_t m)
{
    LOAD(mkfifoat);
    MAPAT(h, dirfd, path, 0);
    return REAL(mkfifoat)(h == path ? dirfd : AT_FDCWD, h, m);
}

DEF_REAL(int, mknod, const char *, mode_t, dev_t)
int mknod(const char *path, mode_t m, dev_t dev)
{
    LOAD(mknod);
    MAP(h, path, 0);
    return REAL(mknod)(h, m, dev);
}

DEF_REAL(int, mknodat, int, const char *, mode_t, dev_t)
int mknodat(int dirfd, const char *path, mode_t m, dev_t dev)
{
    LOAD(mknodat);
    MAPAT(h, dirfd, path, 0);
    return REAL(mknodat)(h == path ? dirfd : AT_FDCWD, h, m, dev);
}

DEF_REAL(int, chown, const char *, uid_t, gid_t)
int chown(const char *path, uid_t u, gid_t g)
{
    LOAD(chown);
    MAP(h, path, 1);
    return REAL(chown)(h, u, g);
}

DEF_REAL(int, lchown, const char *, uid_t, gid_t)
int lchown(const char *path, uid_t u, gid_t g)
{
    LOAD(lchown);
    MAP(h, path, 0);
    return REAL(lchown)(h, u, g);
}

DEF_REAL(int, fchownat, int, const char *, uid_t, gid_t, int)
int fchownat(int dirfd, const char *path, uid_t u, gid_t g, int flags)
{
    LOAD(fchownat);
    if ((flags & AT_EMPTY_PATH) && path && !*path)
        return REAL(fchownat)(dirfd, path, u, g, flags);
    MAPAT(h, dirfd, path, !(flags & AT_SYMLINK_NOFOLLOW));
    return REAL(fchownat)(h == path ? dirfd : AT_FDCWD, h, u, g, flags);
}

DEF_REAL(int, utime, const char *, const struct utimbuf *)
int utime(const char *path, const struct utimbuf *t)
{
    LOAD(utime);
    MAP(h, path, 1);
    return REAL(utime)(h, t);
}

DEF_REAL(int, utimes, const char *, const struct timeval *)
int utimes(const char *path, const struct timeval t[2])
{
    LOAD(utimes);
    MAP(h, path, 1);
    return REAL(utimes)(h, t);
}

DEF_REAL(int, lutimes, const char *, const struct timeval *)
int lutimes(const char *path, const struct timeval t[2])
{
    LOAD(lutimes);
    MAP(h, path, 0);
    return REAL(lutimes)(h, t);
}

DEF_REAL(int, futimesat, int, const char *, const struct timeval *)
int futimesat(int dirfd, const char *path, const struct timeval t[2])
{
    LOAD(futimesat);
    if (!path)
        return REAL(futimesat)(dirfd, path, t);
    MAPAT(h, dirfd, path, 1);
    return REAL(futimesat)(h == path ? dirfd : AT_FDCWD, h, t);
}

DEF_REAL(int, utimensat, int, const char *, const struct timespec *, int)
int utimensat(int dirfd, const char *path, const struct timespec t[2], int flags)
{
    LOAD(utimensat);
    if (!path)
        return REAL(utimensat)(dirfd, path, t, flags);
    MAPAT(h, dirfd, path, !(flags & AT_SYMLINK_NOFOLLOW));
    return REAL(utimensat)(h == path ? dirfd : AT_FDCWD, h, t, flags);
}

DEF_REAL(void *, dlopen, const char *, int)
void *dlopen(const char *path, int flags)
{
    char buf[PATH_MAX];
    LOAD(dlopen);
    if (path && strchr(path, '/')) {
        const char *h = map_path(path, 1, buf);
        if (h)
            path = h;
    }
    return REAL(dlopen)(path, flags);
}

/* mkstemp family: the template is translated and the generated suffix copied back */
static int temp_call(char *tmpl, int suffixlen, int (*fn)(char *, void *), void *arg)
{
    char buf[PATH_MAX];
    const char *h = map_path(tmpl, 0, buf);
    if (!h)
        return -1;
    if (h == tmpl)
        return fn(tmpl, arg);
    char work[PATH_MAX];
    snprintf(work, sizeof(work), "%s", h);
    int r = fn(work, arg);
    if (r >= 0) {
        size_t tl = strlen(tmpl), wl = strlen(work);
        size_t n = 6 + suffixlen;
        if (tl >= n && wl >= n)
            memcpy(tmpl + tl - n, work + wl - n, 6);
    }
    return r;
}

DEF_REAL(int, mkstemp, char *)
static int do_mkstemp(char *t, void *a)
{
    (void)a;
    return REAL(mkstemp)(t);
}
int mkstemp(char *tmpl)
{
    LOAD(mkstemp);
    return temp_call(tmpl, 0, do_mkstemp, NULL);
}

DEF_REAL(int, mkostemp, char *, int)
static int do_mkostemp(char *t, void *a)
{
    return REAL(mkostemp)(t, *(int *)a);
}
int mkostemp(char *tmpl, int flags)
{
    LOAD(mkostemp);
    return temp_call(tmpl, 0, do_mkostemp, &flags);
}

DEF_REAL(int, mkstemps, char *, int)
static int do_mkstemps(char *t, void *a)
{
    return REAL(mkstemps)(t, *(int *)a);
}
int mkstemps(char *tmpl, int suffixlen)
{
    LOAD(mkstemps);
    return temp_call(tmpl, suffixlen, do_mkstemps, &suffixlen);
}

DEF_REAL(char *, mkdtemp, char *)
static int do_mkdtemp(char *t, void *a)
{
    (void)a;
    return REAL(mkdtemp)(t) ? 0 : -1;
}
char *mkdtemp(char *tmpl)
{
    LOAD(mkdtemp);
    return temp_call(tmpl, 0, do_mkdtemp, NULL) < 0 ? NULL : tmpl;
}

/* tmpnam: candidate names are checked for existence inside the container */
char *tmpnam(char s[L_tmpnam])
{
    static char own[L_tmpnam + 16];
    static unsigned long counter;
    char h[PATH_MAX];
    struct stat st;
    char *out = s ? s : own;
    int i;
    for (i = 0; i < 1000; i++) {
        snprintf(out, L_tmpnam, "/tmp/fk%05d%lu", (int)getpid() % 100000, counter++ % 100000);
        if (!active)
            return out;
        if (lexical_host(out, h) < 0)
            break;
        if (syscall(SYS_newfstatat, AT_FDCWD, h, &st, AT_SYMLINK_NOFOLLOW) < 0 && errno == ENOENT)
            return out;
    }
    return NULL;
}

/* -- exec ------------------------------------------------------------- */

struct execplan {
    char path[PATH_MAX];
    char *argv_store[8];
    char **argv;
    char **envp;
    char *strings[16];
    int nstrings;
};

static char *plan_str(struct execplan *pl, const char *s)
{
    char *d = strdup(s);
    if (d && pl->nstrings < 16)
        pl->strings[pl->nstrings++] = d;
    return d;
}

static void plan_free(struct execplan *pl)
{
    int i;
    for (i = 0; i < pl->nstrings; i++)
        free(pl->strings[i]);
    free(pl->argv);
    if (pl->envp) {
        char **e;
        for (e = pl->envp; *e; e++)
            free(*e);
        free(pl->envp);
    }
}

static int read_interp(const char *path, char *out, size_t size)
{
    unsigned char eh[64];
    int fd = syscall(SYS_openat, AT_FDCWD, path, O_RDONLY | O_CLOEXEC);
    int result = -1;
    if (fd < 0)
        return -1;
    ssize_t n = pread(fd, eh, sizeof(eh), 0);
    out[0] = 0;
    if (n >= 64 && !memcmp(eh, "\177ELF", 4) && eh[4] == 2) {
        unsigned long phoff;
        unsigned short phentsize, phnum;
        memcpy(&phoff, eh + 32, 8);
        memcpy(&phentsize, eh + 54, 2);
        memcpy(&phnum, eh + 56, 2);
        result = 0;
        for (int i = 0; i < phnum; i++) {
            unsigned char ph[56];
            unsigned int type;
            unsigned long off, filesz;
            if (pread(fd, ph, sizeof(ph), phoff + (unsigned long)i * phentsize) != (ssize_t)sizeof(ph))
                break;
            memcpy(&type, ph, 4);
            if (type != 3)
                continue;
            memcpy(&off, ph + 8, 8);
            memcpy(&filesz, ph + 32, 8);
            if (filesz >= size)
                filesz = size - 1;
            ssize_t m = pread(fd, out, filesz, off);
            out[m > 0 ? m : 0] = 0;
            result = 1;
            break;
        }
    } else if (n >= 52 && !memcmp(eh, "\177ELF", 4)) {
        result = 2; /* foreign class: let the kernel decide */
    }
    close(fd);
    return result;
}

static int run_patcher(const char *host)
{
    char *argv[] = {patcher, "-m", "udocker.elf_patcher", "patch-exec", cdir, (char *)host, NULL};
    char pp[PATH_MAX + 16];
    char *envp[] = {pp, "PATH=/usr/local/bin:/usr/bin:/bin", NULL};
    pid_t pid;
    int status;
    if (!patcher || !cdir || !real_posix_spawn)
        return -1;
    snprintf(pp, sizeof(pp), "PYTHONPATH=%s", pypath ? pypath : "");
    if (real_posix_spawn(&pid, patcher, NULL, NULL, argv, envp) != 0)
        return -1;
    while (waitpid(pid, &status, 0) < 0)
        if (errno != EINTR)
            return -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

static int is_env(const char *entry, const char *name)
{
    size_t n = strlen(name);
    return !strncmp(entry, name, n) && entry[n] == '=';
}

/* translate a colon separated list of container directories */
static void map_list(const char *value, char *out, size_t size)
{
    char copy[BUF], h[PATH_MAX];
    char *save = NULL, *tok;
    size_t used = 0;
    out[0] = 0;
    snprintf(copy, sizeof(copy), "%s", value);
    for (tok = strtok_r(copy, ":", &save); tok; tok = strtok_r(NULL, ":", &save)) {
        const char *m = tok;
        if (tok[0] == '/' && resolve(tok, "/", 1, NULL, h) == 0)
            m = h;
        int w = snprintf(out + used, size - used, "%s%s", used ? ":" : "", m);
        if (w < 0 || (size_t)w >= size - used)
            break;
        used += w;
    }
}

static char **build_env(char *const envp[])
{
    size_t n = 0, i = 0;
    char *const *e;
    const char *uld = NULL, *upre = NULL;
    char buf[BUF * 2], mapped[BUF];
    for (e = envp; e && *e; e++)
        n++;
    char **out = calloc(n + nsaved + 8, sizeof(char *));
    if (!out)
        return NULL;
    for (e = envp; e && *e; e++) {
        if (is_env(*e, "LD_LIBRARY_PATH")) {
            uld = *e + 16;
            continue;
        }
        if (is_env(*e, "LD_PRELOAD")) {
            upre = *e + 11;
            continue;
        }
        if (!strncmp(*e, FK_PREFIX, strlen(FK_PREFIX)))
            continue;
        out[i++] = strdup(*e);
    }
    for (int k = 0; k < nsaved; k++) {
        if (!strncmp(saved[k], "UDOCKER_FK_ULDPATH=", 19) || !strncmp(saved[k], "UDOCKER_FK_UPRELOAD=", 20))
            continue;
        out[i++] = strdup(saved[k]);
    }
    if (uld) {
        snprintf(buf, sizeof(buf), "UDOCKER_FK_ULDPATH=%s", uld);
        out[i++] = strdup(buf);
        map_list(uld, mapped, sizeof(mapped));
    } else {
        mapped[0] = 0;
    }
    snprintf(buf, sizeof(buf), "LD_LIBRARY_PATH=%s%s%s", mapped, (*mapped && libpath && *libpath) ? ":" : "",
             libpath ? libpath : "");
    out[i++] = strdup(buf);
    if (upre) {
        snprintf(buf, sizeof(buf), "UDOCKER_FK_UPRELOAD=%s", upre);
        out[i++] = strdup(buf);
        map_list(upre, mapped, sizeof(mapped));
        snprintf(buf, sizeof(buf), "LD_PRELOAD=%s:%s", self ? self : "", mapped);
    } else {
        snprintf(buf, sizeof(buf), "LD_PRELOAD=%s", self ? self : "");
    }
    out[i++] = strdup(buf);
    out[i] = NULL;
    return out;
}

/*
 * Work out what to hand to the kernel for execve(path, argv, envp) issued
 * inside the container.  Returns 0 or -1 with errno.
 */
static int plan_exec(struct execplan *pl, const char *path, char *const argv[], char *const envp[])
{
    char cwd[PATH_MAX], cpath[PATH_MAX], host[PATH_MAX], interp[PATH_MAX];
    char *shebang[2 * MAX_SHEBANG + 2];
    int nsheb = 0, depth, argc = 0, i, k;
    const char *current = path;
    memset(pl, 0, sizeof(*pl));
    if (!path || !*path) {
        errno = ENOENT;
        return -1;
    }
    container_cwd(cwd);
    for (depth = 0;; depth++) {
        if (resolve(current, current[0] == '/' ? "/" : cwd, 1, cpath, host) < 0)
            return -1;
        struct stat st;
        if (syscall(SYS_newfstatat, AT_FDCWD, host, &st, 0) < 0)
            return -1;
        if (S_ISDIR(st.st_mode)) {
            errno = EACCES;
            return -1;
        }
        char head[256];
        int fd = syscall(SYS_openat, AT_FDCWD, host, O_RDONLY | O_CLOEXEC);
        if (fd < 0)
            return -1;
        ssize_t n = read(fd, head, sizeof(head) - 1);
        close(fd);
        if (n < 2 || head[0] != '#' || head[1] != '!')
            break;
        if (depth >= MAX_SHEBANG) {
            errno = ELOOP;
            return -1;
        }
        head[n] = 0;
        char *line = head + 2, *nl = strchr(line, '\n');
        if (nl)
            *nl = 0;
        while (*line == ' ' || *line == '\t')
            line++;
        char *sp = line + strcspn(line, " \t");
        char *opt = NULL;
        if (*sp) {
            *sp++ = 0;
            while (*sp == ' ' || *sp == '\t')
                sp++;
            size_t ol = strlen(sp);
            while (ol && (sp[ol - 1] == ' ' || sp[ol - 1] == '\t' || sp[ol - 1] == '\r'))
                sp[--ol] = 0;
            if (ol)
                opt = sp;
        }
        if (!*line) {
            errno = ENOEXEC;
            return -1;
        }
        /* the interpreter goes first: [interp, opt?, script, ...] */
        char *prefix[3];
        int np = 0;
        prefix[np++] = plan_str(pl, line);
        if (opt)
            prefix[np++] = plan_str(pl, opt);
        prefix[np++] = plan_str(pl, current);
        memmove(shebang + np, shebang, nsheb * sizeof(char *));
        /* an outer script name replaces the inner interpreter argv[0] */
        if (nsheb) {
            memmove(shebang + np, shebang + np + 1, (nsheb - 1) * sizeof(char *));
            nsheb--;
        }
        for (k = 0; k < np; k++)
            shebang[k] = prefix[k];
        nsheb += np;
        current = prefix[0];
    }
    int r = read_interp(host, interp, sizeof(interp));
    if (r < 0) {
        errno = ENOEXEC;
        return -1;
    }
    if (r == 0) {
        fprintf(stderr, "udocker: %s is statically linked and cannot run in mode %s; use mode P1 or P2\n",
                cpath, mode);
        errno = EPERM;
        return -1;
    }
    for (argc = 0; argv && argv[argc]; argc++)
        ;
    pl->argv = calloc(argc + nsheb + 8, sizeof(char *));
    if (!pl->argv) {
        errno = ENOMEM;
        return -1;
    }
    /* argument vector the program would have received from the kernel */
    char **vec = calloc(argc + nsheb + 2, sizeof(char *));
    int nvec = 0;
    if (!vec) {
        errno = ENOMEM;
        return -1;
    }
    if (nsheb) {
        for (k = 0; k < nsheb; k++)
            vec[nvec++] = shebang[k];
        for (k = 1; k < argc; k++)
            vec[nvec++] = argv[k];
    } else {
        for (k = 0; k < argc; k++)
            vec[nvec++] = argv[k];
    }
    int direct = 0;
    if (r == 1 && (!strcmp(mode, "F3") || !strcmp(mode, "F4"))) {
        if (loader && !strcmp(interp, loader))
            direct = 1;
        else if (!strcmp(mode, "F4") && run_patcher(host) == 0 && read_interp(host, interp, sizeof(interp)) == 1 &&
                 loader && !strcmp(interp, loader))
            direct = 1;
    }
    if (r == 2)
        direct = 1;
    i = 0;
    if (direct || !loader || !*loader) {
        snprintf(pl->path, sizeof(pl->path), "%s", host);
        for (k = 0; k < nvec; k++)
            pl->argv[i++] = vec[k];
    } else {
        snprintf(pl->path, sizeof(pl->path), "%s", loader);
        pl->argv[i++] = plan_str(pl, loader);
        pl->argv[i++] = "--argv0";
        pl->argv[i++] = nvec ? vec[0] : (char *)current;
        pl->argv[i++] = plan_str(pl, host);
        for (k = 1; k < nvec; k++)
            pl->argv[i++] = vec[k];
    }
    pl->argv[i] = NULL;
    free(vec);
    pl->envp = build_env(envp);
    if (!pl->envp) {
        errno = ENOMEM;
        return -1;
    }
    return 0;
}

DEF_REAL(int, execve, const char *, char *const[], char *const[])
int execve(const char *path, char *const argv[], char *const envp[])
{
    struct execplan pl;
    LOAD(execve);
    if (!active)
        return REAL(execve)(path, argv, envp);
    if (plan_exec(&pl, path, argv, envp) < 0) {
        int saved_errno = errno;
        plan_free(&pl);
        errno = saved_errno;
        return -1;
    }
    REAL(execve)(pl.path, pl.argv, pl.envp);
    int saved_errno = errno;
    plan_free(&pl);
    errno = saved_errno;
    return -1;
}

int execv(const char *path, char *const argv[])
{
    return execve(path, argv, environ);
}

static const char *env_lookup(char *const envp[], const char *name)
{
    char *const *e;
    for (e = envp; e && *e; e++)
        if (is_env(*e, name))
            return *e + strlen(name) + 1;
    return NULL;
}

/* execvp-style search of the container PATH */
static int search_exec(const char *file, char *const argv[], char *const envp[],
                       int (*attempt)(const char *, char *const[], char *const[], void *), void *ctx)
{
    char cand[PATH_MAX], h[PATH_MAX];
    int denied = 0;
    if (!file || !*file) {
        errno = ENOENT;
        return -1;
    }
    if (strchr(file, '/'))
        return attempt(file, argv, envp, ctx);
    const char *path = env_lookup(envp, "PATH");
    if (!path)
        path = "/bin:/usr/bin";
    const char *p = path;
    while (1) {
        const char *end = strchr(p, ':');
        size_t n = end ? (size_t)(end - p) : strlen(p);
        if (n == 0)
            snprintf(cand, sizeof(cand), "%s", file);
        else
            snprintf(cand, sizeof(cand), "%.*s/%s", (int)n, p, file);
        if (resolve(cand, "/", 1, NULL, h) == 0 && syscall(SYS_faccessat, AT_FDCWD, h, X_OK) == 0) {
            struct stat st;
            if (syscall(SYS_newfstatat, AT_FDCWD, h, &st, 0) == 0 && S_ISREG(st.st_mode)) {
                int r = attempt(cand, argv, envp, ctx);
                if (r >= 0 || errno != ENOENT)
                    return r;
            }
        } else if (errno == EACCES) {
            denied = 1;
        }
        if (!end)
            break;
        p = end + 1;
    }
    errno = denied ? EACCES : ENOENT;
    return -1;
}

static int attempt_exec(const char *path, char *const argv[], char *const envp[], void *ctx)
{
    (void)ctx;
    return execve(path, argv, envp);
}

int execvpe(const char *file, char *const argv[], char *const envp[])
{
    if (!active) {
        LOAD(execve);
        static int (*real_execvpe)(const char *, char *const[], char *const[]);
        if (!real_execvpe)
            real_execvpe = dlsym(RTLD_NEXT, "execvpe");
        return real_execvpe(file, argv, envp);
    }
    return search_exec(file, argv, envp, attempt_exec, NULL);
}

int execvp(const char *file, char *const argv[])
{
    return execvpe(file, argv, environ);
}

static char **collect(const char *arg, va_list ap, char ***envp_out)
{
    size_t n = 1, cap = 16;
    char **v = malloc(cap * sizeof(char *));
    if (!v)
        return NULL;
    v[0] = (char *)arg;
    while (arg) {
        arg = va_arg(ap, const char *);
        if (n + 1 >= cap) {
            cap *= 2;
            char **nv = realloc(v, cap * sizeof(char *));
            if (!nv) {
                free(v);
                return NULL;
            }
            v = nv;
        }
        v[n++] = (char *)arg;
    }
    if (envp_out)
        *envp_out = va_arg(ap, char **);
    return v;
}

int execl(const char *path, const char *arg, ...)
{
    va_list ap;
    va_start(ap, arg);
    char **v = collect(arg, ap, NULL);
    va_end(ap);
    if (!v) {
        errno = ENOMEM;
        return -1;
    }
    int r = execve(path, v, environ);
    free(v);
    return r;
}

int execlp(const char *file, const char *arg, ...)
{
    va_list ap;
    va_start(ap, arg);
    char **v = collect(arg, ap, NULL);
    va_end(ap);
    if (!v) {
        errno = ENOMEM;
        return -1;
    }
    int r = execvpe(file, v, environ);
    free(v);
    return r;
}

int execle(const char *path, const char *arg, ...)
{
    char **envp;
    va_list ap;
    va_start(ap, arg);
    char **v = collect(arg, ap, &envp);
    va_end(ap);
    if (!v) {
        errno = ENOMEM;
        return -1;
    }
    int r = execve(path, v, envp);
    free(v);
    return r;
}

struct spawnctx {
    pid_t *pid;
    const posix_spawn_file_actions_t *fa;
    const posix_spawnattr_t *attr;
    int result;
};

static int attempt_spawn(const char *path, char *const argv[], char *const envp[], void *arg)
{
    struct spawnctx *ctx = arg;
    struct execplan pl;
    if (plan_exec(&pl, path, argv, envp) < 0) {
        ctx->result = errno;
        plan_free(&pl);
        errno = ctx->result;
        return -1;
    }
    ctx->result = real_posix_spawn(ctx->pid, pl.path, ctx->fa, ctx->attr, pl.argv, pl.envp);
    plan_free(&pl);
    if (ctx->result) {
        errno = ctx->result;
        return -1;
    }
    return 0;
}

int posix_spawn(pid_t *pid, const char *path, const posix_spawn_file_actions_t *fa,
                const posix_spawnattr_t *attr, char *const argv[], char *const envp[])
{
    struct spawnctx ctx = {pid, fa, attr, 0};
    if (!real_posix_spawn)
        real_posix_spawn = dlsym(RTLD_NEXT, "posix_spawn");
    if (!active)
        return real_posix_spawn(pid, path, fa, attr, argv, envp);
    return attempt_spawn(path, argv, envp, &ctx) < 0 ? errno : 0;
}

int posix_spawnp(pid_t *pid, const char *file, const posix_spawn_file_actions_t *fa,
                 const posix_spawnattr_t *attr, char *const argv[], char *const envp[])
{
    struct spawnctx ctx = {pid, fa, attr, 0};
    if (!real_posix_spawn)
        real_posix_spawn = dlsym(RTLD_NEXT, "posix_spawn");
    if (!active) {
        static int (*real_spawnp)(pid_t *, const char *, const posix_spawn_file_actions_t *,
                                  const posix_spawnattr_t *, char *const[], char *const[]);
        if (!real_spawnp)
            real_spawnp = dlsym(RTLD_NEXT, "posix_spawnp");
        return real_spawnp(pid, file, fa, attr, argv, envp);
    }
    return search_exec(file, argv, envp, attempt_spawn, &ctx) < 0 ? errno : 0;
}

/* system() and popen() spawn /bin/sh internally, so they are redone here */
DEF_REAL(int, system, const char *)
int system(const char *cmd)
{
    LOAD(system);
    if (!active)
        return REAL(system)(cmd);
    if (!cmd)
        return 1;
    struct sigaction ign, oint, oquit;
    sigset_t block, omask;
    int status = -1;
    memset(&ign, 0, sizeof(ign));
    ign.sa_handler = SIG_IGN;
    sigaction(SIGINT, &ign, &oint);
    sigaction(SIGQUIT, &ign, &oquit);
    sigemptyset(&block);
    sigaddset(&block, SIGCHLD);
    sigprocmask(SIG_BLOCK, &block, &omask);
    pid_t pid = fork();
    if (pid == 0) {
        sigaction(SIGINT, &oint, NULL);
        sigaction(SIGQUIT, &oquit, NULL);
        sigprocmask(SIG_SETMASK, &omask, NULL);
        char *argv[] = {"sh", "-c", (char *)cmd, NULL};
        execve("/bin/sh", argv, environ);
        _exit(127);
    }
    if (pid > 0) {
        while (waitpid(pid, &status, 0) < 0)
            if (errno != EINTR) {
                status = -1;
                break;
            }
    }
    sigaction(SIGINT, &oint, NULL);
    sigaction(SIGQUIT, &oquit, NULL);
    sigprocmask(SIG_SETMASK, &omask, NULL);
    return status;
}

#define MAX_POPEN 64
static struct {
    FILE *f;
    pid_t pid;
} popen_table[MAX_POPEN];

DEF_REAL(FILE *, popen, const char *, const char *)
FILE *popen(const char *cmd, const char *type)
{
    int fds[2], slot;
    LOAD(popen);
    if (!active)
        return REAL(popen)(cmd, type);
    if (!type || (type[0] != 'r' && type[0] != 'w')) {
        errno = EINVAL;
        return NULL;
    }
    for (slot = 0; slot < MAX_POPEN && popen_table[slot].f; slot++)
        ;
    if (slot == MAX_POPEN) {
        errno = EMFILE;
        return NULL;
    }
    if (pipe2(fds, O_CLOEXEC) < 0)
        return NULL;
    int reading = type[0] == 'r';
    pid_t pid = fork();
    if (pid < 0) {
        close(fds[0]);
        close(fds[1]);
        return NULL;
    }
    if (pid == 0) {
        int childfd = reading ? fds[1] : fds[0];
        int target = reading ? 1 : 0;
        if (childfd != target) {
            dup2(childfd, target);
        } else {
            fcntl(childfd, F_SETFD, 0);
        }
        char *argv[] = {"sh", "-c", (char *)cmd, NULL};
        execve("/bin/sh", argv, environ);
        _exit(127);
    }
    close(reading ? fds[1] : fds[0]);
    FILE *f = fdopen(reading ? fds[0] : fds[1], reading ? "r" : "w");
    if (!f)
        return NULL;
    popen_table[slot].f = f;
    popen_table[slot].pid = pid;
    return f;
}

DEF_REAL(int, pclose, FILE *)
int pclose(FILE *f)
{
    int slot, status;
    LOAD(pclose);
    for (slot = 0; slot < MAX_POPEN; slot++)
        if (popen_table[slot].f == f)
            break;
    if (slot == MAX_POPEN)
        return REAL(pclose)(f);
    pid_t pid = popen_table[slot].pid;
    popen_table[slot].f = NULL;
    fclose(f);
    while (waitpid(pid, &status, 0) < 0)
        if (errno != EINTR)
            return -1;
    return status;
}
