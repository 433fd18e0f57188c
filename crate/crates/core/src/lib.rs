pub mod apps;
pub mod curves;
pub mod engine;
pub mod ledger;
pub mod num;
pub mod sim;
