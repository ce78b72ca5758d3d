//! Certified sub-vocabulary decoding over a clustered output embedding.

pub mod bench;
pub mod bounds;
pub mod certify;
pub mod cluster;
pub mod decode;
pub mod error;
pub mod oracle;
pub mod shard;
pub mod tensor_io;
pub mod verify;

pub use error::{Error, FormatError, Result};
