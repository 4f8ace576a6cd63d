pub mod compare;
pub mod fit;
pub mod simulate;
pub mod spectrum;
pub mod stream;

use mode_sleuth::Error;

/// 2 for configuration/usage problems, 1 for numerical failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_)
        | Error::InvalidTimes(_)
        | Error::InvalidScheme(_)
        | Error::InvalidTree(_)
        | Error::InvalidGraph
        | Error::NonUniform
        | Error::InsufficientBand
        | Error::Io(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

/// Load a channel CSV file.
pub fn load_csv(path: &std::path::Path) -> mode_sleuth::Result<(Vec<String>, Vec<mode_sleuth::data::ChannelSample>)> {
    let file = std::fs::File::open(path)?;
    mode_sleuth::data::read_channel_csv(file)
}
