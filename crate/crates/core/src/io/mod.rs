//! Weight files and CSV tables.

mod table;
mod weights;

pub use table::{
    format_real, read_columns, read_context, read_targets, write_predictions, write_table, CsvTable,
};
pub use weights::{
    load_weights, load_weights_str, save_weights, weights_to_string, FORMAT_VERSION,
};
