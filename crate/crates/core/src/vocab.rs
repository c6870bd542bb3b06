//! Token id layout shared by tasks, models and dataset files.
//!
//! Content symbols occupy `0..n`. The reserved symbols follow:
//!
//! | id    | symbol            |
//! |-------|-------------------|
//! | n     | end of output     |
//! | n + 1 | unary marker `@`  |
//! | n + 2 | start of input    |
//! | n + 3 | end of input      |
//! | n + 4 | decoder placeholder |
//!
//! Output classes are `0..=n`: every content symbol plus end of output, so an
//! output class id equals its token id.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    content: usize,
}

impl Vocab {
    pub fn new(content: usize) -> Self {
        Vocab { content }
    }

    pub fn content_size(&self) -> usize {
        self.content
    }

    pub fn end(&self) -> usize {
        self.content
    }

    pub fn at(&self) -> usize {
        self.content + 1
    }

    pub fn start_input(&self) -> usize {
        self.content + 2
    }

    pub fn end_input(&self) -> usize {
        self.content + 3
    }

    pub fn placeholder(&self) -> usize {
        self.content + 4
    }

    /// Number of distinct input token ids.
    pub fn input_size(&self) -> usize {
        self.content + 5
    }

    /// Number of output classes.
    pub fn output_size(&self) -> usize {
        self.content + 1
    }

    pub fn is_content(&self, id: usize) -> bool {
        id < self.content
    }
}
