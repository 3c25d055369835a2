//! Analytic workspace accounting.
//!
//! Every numeric buffer the library allocates is a [`Buf`], which reports its byte
//! size to a thread-local accountant when created and when dropped. Wrapping a
//! computation in [`track_workspace`] returns the peak number of simultaneously live
//! bytes allocated inside the scope. Buffers created before the scope are not counted,
//! even if they are dropped inside it, so the numbers depend only on shapes and on
//! evaluation order, never on the allocator or the OS.
//!
//! Accounting is per thread. Buffers allocated on worker threads (parallel batch
//! execution) are invisible to a scope opened on the calling thread.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Deref, DerefMut};

struct Frame {
    id: u64,
    current: usize,
    peak: usize,
}

thread_local! {
    static FRAMES: RefCell<Vec<Frame>> = const { RefCell::new(Vec::new()) };
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

/// Registers `bytes` with all open scopes. Returns the id of the innermost scope, or
/// 0 when none is open.
fn acquire(bytes: usize) -> u64 {
    FRAMES.with(|frames| {
        let mut frames = frames.borrow_mut();
        for f in frames.iter_mut() {
            f.current += bytes;
            f.peak = f.peak.max(f.current);
        }
        frames.last().map_or(0, |f| f.id)
    })
}

fn release(bytes: usize, owner: u64) {
    if owner == 0 {
        return;
    }
    // Scopes with id <= owner that are still open were already open when the buffer
    // was acquired, since scopes nest.
    let _ = FRAMES.try_with(|frames| {
        let mut frames = frames.borrow_mut();
        for f in frames.iter_mut().filter(|f| f.id <= owner) {
            f.current = f.current.saturating_sub(bytes);
        }
    });
}

/// Runs `f` and returns its result with the peak accounted bytes allocated inside.
///
/// Scopes may nest; an inner scope's buffers also count towards every enclosing one.
pub fn track_workspace<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let id = NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    });
    FRAMES.with(|frames| {
        frames.borrow_mut().push(Frame {
            id,
            current: 0,
            peak: 0,
        })
    });
    let out = f();
    let peak = FRAMES.with(|frames| {
        let mut frames = frames.borrow_mut();
        let frame = frames.pop().expect("workspace scope stack");
        debug_assert_eq!(frame.id, id);
        frame.peak
    });
    (out, peak)
}

/// A fixed-length, accounted heap buffer.
pub struct Buf<T> {
    data: Vec<T>,
    owner: u64,
}

impl<T> Buf<T> {
    pub fn from_vec(data: Vec<T>) -> Self {
        let owner = acquire(data.len() * std::mem::size_of::<T>());
        Buf { data, owner }
    }

    /// Accounted size of this buffer.
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Releases the accounting and returns the underlying vector.
    pub fn into_vec(mut self) -> Vec<T> {
        release(self.bytes(), self.owner);
        self.owner = 0;
        std::mem::take(&mut self.data)
    }
}

impl<T: Clone> Buf<T> {
    pub fn filled(len: usize, value: T) -> Self {
        Self::from_vec(vec![value; len])
    }

    pub fn from_slice(s: &[T]) -> Self {
        Self::from_vec(s.to_vec())
    }
}

impl<T: Clone + Default> Buf<T> {
    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![T::default(); len])
    }
}

impl<T> Drop for Buf<T> {
    fn drop(&mut self) {
        release(self.bytes(), self.owner);
    }
}

impl<T: Clone> Clone for Buf<T> {
    fn clone(&self) -> Self {
        Self::from_vec(self.data.clone())
    }
}

impl<T> Deref for Buf<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Buf<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: fmt::Debug> fmt::Debug for Buf<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.data.fmt(f)
    }
}

impl<T: PartialEq> PartialEq for Buf<T> {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl<T> From<Vec<T>> for Buf<T> {
    fn from(v: Vec<T>) -> Self {
        Self::from_vec(v)
    }
}

impl<T> FromIterator<T> for Buf<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        Self::from_vec(iter.into_iter().collect())
    }
}
