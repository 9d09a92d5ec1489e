pub use alfa_core;
