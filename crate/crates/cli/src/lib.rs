//! Command implementations behind the `samora` binary.

use samora_core::{Error, ErrorClass};

pub mod ablate;
pub mod analyze;
pub mod config;
pub mod gradcheck;
pub mod runner;
pub mod sensitivity;
pub mod train;

/// Exit codes are stable API: 0 success, 1 verification failure, 2 config
/// error, 3 numeric abort, 4 I/O or checkpoint error.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Verify(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Verify(_) => 1,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config | ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
                ErrorClass::Io => 4,
                ErrorClass::Internal => 1,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Verify(m) => write!(f, "verification failure: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

/// Worker cap for sweep commands: SAMORA_WORKERS when set, otherwise the
/// machine's parallelism, never more than the job count.
pub fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("SAMORA_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    cap.min(jobs).max(1)
}

/// Runs the jobs on up to `workers` threads, returning results in job
/// order regardless of scheduling.
pub fn run_jobs<T, F>(jobs: Vec<F>, workers: usize) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    if workers <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop();
                let Some((idx, job)) = job else { break };
                let out = job();
                results.lock().unwrap().push((idx, out));
            });
        }
    });
    let mut tagged = results.into_inner().unwrap();
    tagged.sort_by_key(|(idx, _)| *idx);
    tagged.into_iter().map(|(_, out)| out).collect()
}
