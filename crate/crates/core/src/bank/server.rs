use std::convert::Infallible;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::BankService;
use crate::wire::{Endpoint, Side, DEFAULT_TIMEOUT};

/// A running TCP listener. At most `concurrency` sessions run at once; further
/// connections wait in the accept backlog.
pub struct BankServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl BankServer {
    pub fn spawn(
        bank: Arc<BankService>,
        listener: TcpListener,
        concurrency: usize,
    ) -> io::Result<Self> {
        Self::spawn_with_timeout(bank, listener, concurrency, DEFAULT_TIMEOUT)
    }

    pub fn spawn_with_timeout(
        bank: Arc<BankService>,
        listener: TcpListener,
        concurrency: usize,
        timeout: Duration,
    ) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let mut workers = Vec::new();
        for _ in 0..concurrency.max(1) {
            let listener = listener.try_clone()?;
            let bank = Arc::clone(&bank);
            let stop = Arc::clone(&stop);
            workers.push(std::thread::spawn(move || loop {
                let stream = match listener.accept() {
                    Ok((stream, _)) => stream,
                    Err(err) => {
                        log::warn!("accept failed: {err}");
                        std::thread::sleep(Duration::from_millis(50));
                        continue;
                    }
                };
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                match Endpoint::tcp(stream, Side::Bank, timeout) {
                    Ok(mut endpoint) => {
                        bank.handle_session(&mut endpoint);
                    }
                    Err(err) => log::warn!("cannot configure connection: {err}"),
                }
            }));
        }
        Ok(Self {
            addr,
            stop,
            workers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and waits for in-flight sessions to finish.
    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        for _ in &self.workers {
            // Wake each worker blocked in accept.
            let _ = TcpStream::connect(self.addr);
        }
        for worker in self.workers {
            let _ = worker.join();
        }
    }

    /// Blocks until the workers exit, which only happens after `shutdown`.
    pub fn join(self) {
        for worker in self.workers {
            let _ = worker.join();
        }
    }
}

/// Serves forever.
pub fn serve(
    bank: Arc<BankService>,
    listener: TcpListener,
    concurrency: usize,
) -> io::Result<Infallible> {
    BankServer::spawn(bank, listener, concurrency)?.join();
    Err(io::Error::other("bank server workers exited"))
}
