//! Demand-driven automotive data pipelines on MEC nodes.
//!
//! Producers push geo-tagged [`envelope::Envelope`]s into a [`mecnode::MecNode`];
//! nothing is processed unless a consumer has asked for that datatype.
//! The [`cloudhub::CloudHub`] indexes nodes by quadkey tile, routes consumer
//! subscriptions and keeps the accounts. [`sim`] drives the whole system on a
//! simulated clock.

pub mod broker;
pub mod clock;
pub mod cloudhub;
pub mod envelope;
pub mod lifecycle;
pub mod mecnode;
pub mod policy;
pub mod service;
pub mod sim;
pub mod tilegrid;

/// `[a-z0-9-]{1,64}`, shared by datatypes and topic segments.
pub(crate) fn is_name_token(s: &str) -> bool {
    !s.is_empty() && s.len() <= 64 && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

#[cfg(test)]
mod tests {
    use super::is_name_token;

    #[test]
    fn name_tokens() {
        assert!(is_name_token("cam"));
        assert!(is_name_token("m-1"));
        assert!(!is_name_token(""));
        assert!(!is_name_token("Cam"));
        assert!(!is_name_token("a_b"));
        assert!(!is_name_token(&"a".repeat(65)));
    }
}
