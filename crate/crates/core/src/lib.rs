pub mod fsm;
pub mod gka;
pub mod group;
pub mod messages;
pub mod oracle;
pub mod sim;
pub mod time;

pub use gka::{NodeId, Nonce};
pub use group::{ExpCounter, GroupElement, GroupError, GroupParams, Scalar};
pub use time::Time;
