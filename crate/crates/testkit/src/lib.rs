//! Disposable PostgreSQL clusters for integration tests.
//!
//! A cluster is booted once per test process (`initdb` into a temp dir, then a
//! foreground `postgres` child on a free loopback port) and torn down from an
//! `atexit` hook. Binaries are located through, in order:
//!
//! 1. `LITHE_PG_BIN` (directory containing `initdb` and `postgres`)
//! 2. `initdb` on `PATH`
//! 3. the `pgserver` Python package (`pip install pgserver`)
//!
//! Setting `LITHE_TEST_PG_URL` (a `postgres://user@host:port` URL) skips the
//! boot entirely and uses an already running server instead.
//!
//! When the process runs as root the cluster is started as `nobody`, since
//! PostgreSQL refuses to run as the superuser.

use std::io::Read;
use std::net::TcpListener;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicI32, AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

/// Connection coordinates of a running server.
#[derive(Debug, Clone)]
pub struct PgServer {
    pub host: String,
    pub port: u16,
    pub user: String,
    pub password: Option<String>,
}

impl PgServer {
    pub fn connect(&self, dbname: &str) -> Result<postgres::Client, postgres::Error> {
        let mut cfg = postgres::Config::new();
        cfg.host(&self.host)
            .port(self.port)
            .user(&self.user)
            .dbname(dbname);
        if let Some(pw) = &self.password {
            cfg.password(pw);
        }
        cfg.connect(postgres::NoTls)
    }

    /// Creates a fresh database, runs `setup_sql` in it and returns its name.
    ///
    /// Names are made unique per process so tests sharing a server cannot
    /// collide.
    pub fn create_database(&self, prefix: &str, setup_sql: &str) -> Result<String, String> {
        static COUNTER: AtomicUsize = AtomicUsize::new(0);
        let name = format!(
            "{}_{}_{}",
            prefix,
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::SeqCst)
        );
        {
            // CREATE DATABASE copies a template and fails if another session
            // is copying it concurrently.
            static CREATE: Mutex<()> = Mutex::new(());
            let _guard = CREATE.lock().unwrap_or_else(|p| p.into_inner());
            let mut admin = self.connect("postgres").map_err(describe)?;
            admin
                .batch_execute(&format!("DROP DATABASE IF EXISTS {name}"))
                .map_err(describe)?;
            admin
                .batch_execute(&format!(
                    "CREATE DATABASE {name} TEMPLATE template0 ENCODING 'UTF8'"
                ))
                .map_err(describe)?;
        }
        let mut client = self.connect(&name).map_err(describe)?;
        client
            .batch_execute(setup_sql)
            .map_err(|e| format!("setup of {name} failed: {}", describe(e)))?;
        Ok(name)
    }
}

fn describe(e: postgres::Error) -> String {
    match e.as_db_error() {
        Some(db) => format!("{}: {}", db.severity(), db.message()),
        None => e.to_string(),
    }
}

static SERVER: OnceLock<Result<PgServer, String>> = OnceLock::new();
static CHILD_PID: AtomicI32 = AtomicI32::new(0);
static CLUSTER: Mutex<Option<Cluster>> = Mutex::new(None);

struct Cluster {
    _dir: tempfile::TempDir,
    child: Child,
}

/// Returns the shared server, booting it on first use.
///
/// The error string explains why no server is available (no binaries found,
/// `initdb` failed, ...).
pub fn server() -> Result<&'static PgServer, String> {
    SERVER.get_or_init(boot).as_ref().map_err(Clone::clone)
}

fn boot() -> Result<PgServer, String> {
    if let Ok(url) = std::env::var("LITHE_TEST_PG_URL") {
        return parse_url(&url);
    }
    let bin = find_bin_dir().ok_or_else(|| {
        "no PostgreSQL binaries found (set LITHE_PG_BIN, put initdb on PATH, or `pip install pgserver`)"
            .to_string()
    })?;

    let dir = tempfile::Builder::new()
        .prefix("lithe-pg-")
        .tempdir()
        .map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let run_as = unprivileged_ids();
    if let Some((uid, gid)) = run_as {
        chown(dir.path(), uid, gid)?;
    }

    let mut initdb = Command::new(bin.join("initdb"));
    initdb
        .arg("-D")
        .arg(&data)
        .args([
            "-U",
            "postgres",
            "--auth=trust",
            "--no-sync",
            "-E",
            "UTF8",
            "--locale=C",
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::piped());
    drop_privileges(&mut initdb, run_as);
    let out = initdb.output().map_err(|e| format!("initdb: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "initdb failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }

    let port = free_port()?;
    let mut postgres = Command::new(bin.join("postgres"));
    postgres
        .arg("-D")
        .arg(&data)
        .arg("-p")
        .arg(port.to_string())
        .arg("-k")
        .arg(dir.path())
        .args([
            "-c",
            "listen_addresses=127.0.0.1",
            "-c",
            "fsync=off",
            "-c",
            "synchronous_commit=off",
            "-c",
            "full_page_writes=off",
            "-c",
            "max_connections=200",
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::piped());
    drop_privileges(&mut postgres, run_as);
    let mut child = postgres.spawn().map_err(|e| format!("postgres: {e}"))?;
    CHILD_PID.store(child.id() as i32, Ordering::SeqCst);
    unsafe {
        libc::atexit(shutdown);
    }

    let server = PgServer {
        host: "127.0.0.1".into(),
        port,
        user: "postgres".into(),
        password: None,
    };
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        if server.connect("postgres").is_ok() {
            break;
        }
        if let Ok(Some(status)) = child.try_wait() {
            let mut err = String::new();
            if let Some(mut stderr) = child.stderr.take() {
                let _ = stderr.read_to_string(&mut err);
            }
            return Err(format!("postgres exited early ({status}): {err}"));
        }
        if Instant::now() > deadline {
            return Err("postgres did not accept connections within 30s".into());
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    *CLUSTER.lock().unwrap() = Some(Cluster { _dir: dir, child });
    Ok(server)
}

extern "C" fn shutdown() {
    let pid = CHILD_PID.swap(0, Ordering::SeqCst);
    if pid <= 0 {
        return;
    }
    // SIGINT is postgres' "fast" shutdown.
    unsafe {
        libc::kill(pid, libc::SIGINT);
    }
    if let Ok(mut guard) = CLUSTER.lock() {
        if let Some(mut cluster) = guard.take() {
            let deadline = Instant::now() + Duration::from_secs(10);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = cluster.child.try_wait() {
                    break;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            let _ = cluster.child.kill();
        }
    }
}

fn parse_url(url: &str) -> Result<PgServer, String> {
    let rest = url
        .strip_prefix("postgres://")
        .or_else(|| url.strip_prefix("postgresql://"))
        .ok_or_else(|| format!("unsupported url {url}"))?;
    let (auth, hostport) = rest.split_once('@').ok_or("url needs user@host")?;
    let (user, password) = match auth.split_once(':') {
        Some((u, p)) => (u.to_string(), Some(p.to_string())),
        None => (auth.to_string(), None),
    };
    let hostport = hostport.split('/').next().unwrap_or(hostport);
    let (host, port) = match hostport.split_once(':') {
        Some((h, p)) => (h.to_string(), p.parse().map_err(|_| "bad port")?),
        None => (hostport.to_string(), 5432),
    };
    Ok(PgServer {
        host,
        port,
        user,
        password,
    })
}

fn find_bin_dir() -> Option<PathBuf> {
    let has_bins = |p: &Path| p.join("initdb").is_file() && p.join("postgres").is_file();
    if let Ok(dir) = std::env::var("LITHE_PG_BIN") {
        let p = PathBuf::from(dir);
        if has_bins(&p) {
            return Some(p);
        }
    }
    if let Some(path) = std::env::var_os("PATH") {
        for dir in std::env::split_paths(&path) {
            if has_bins(&dir) {
                return Some(dir);
            }
        }
    }
    let out = Command::new("python3")
        .args([
            "-c",
            "import os, pgserver; print(os.path.dirname(pgserver.__file__))",
        ])
        .stderr(Stdio::null())
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    let pkg = PathBuf::from(String::from_utf8_lossy(&out.stdout).trim());
    let bin = pkg.join("pginstall").join("bin");
    has_bins(&bin).then_some(bin)
}

fn free_port() -> Result<u16, String> {
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let port = listener.local_addr().map_err(|e| e.to_string())?.port();
    Ok(port)
}

fn unprivileged_ids() -> Option<(u32, u32)> {
    if unsafe { libc::geteuid() } != 0 {
        return None;
    }
    let name = std::ffi::CString::new("nobody").ok()?;
    let pw = unsafe { libc::getpwnam(name.as_ptr()) };
    if pw.is_null() {
        return Some((65534, 65534));
    }
    unsafe { Some(((*pw).pw_uid, (*pw).pw_gid)) }
}

fn chown(path: &Path, uid: u32, gid: u32) -> Result<(), String> {
    std::os::unix::fs::chown(path, Some(uid), Some(gid)).map_err(|e| format!("chown {path:?}: {e}"))
}

fn drop_privileges(cmd: &mut Command, ids: Option<(u32, u32)>) {
    if let Some((uid, gid)) = ids {
        unsafe {
            cmd.pre_exec(move || {
                if libc::setgroups(0, std::ptr::null()) != 0
                    || libc::setgid(gid) != 0
                    || libc::setuid(uid) != 0
                {
                    return Err(std::io::Error::last_os_error());
                }
                Ok(())
            });
        }
    }
}
