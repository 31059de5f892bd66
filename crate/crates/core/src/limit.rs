use parking_lot::{Condvar, Mutex};

/// Counting gate bounding how many calls to a remote collaborator run at once.
#[derive(Debug)]
pub struct InflightLimiter {
    max: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
}

pub struct InflightGuard<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        InflightLimiter {
            max: max.max(1),
            in_flight: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightGuard<'_> {
        let mut n = self.in_flight.lock();
        while *n >= self.max {
            self.released.wait(&mut n);
        }
        *n += 1;
        InflightGuard { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock()
    }

    pub fn max(&self) -> usize {
        self.max
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock();
        *n -= 1;
        self.limiter.released.notify_one();
    }
}
