//! Library surface of the `seqtape` command line tool: JSON document
//! formats and the command implementations, split out so integration tests
//! can build inputs with the same serializers the binary uses.

pub mod commands;
pub mod formats;
