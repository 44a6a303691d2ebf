pub mod corpus;
pub mod oracle;
pub mod stub_server;
