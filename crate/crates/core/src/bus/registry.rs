use std::collections::BTreeMap;

use super::topic::{validate_topic, TopicPattern};
use super::BusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Master,
    Slave,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRegistration {
    pub node_id: String,
    pub role: NodeRole,
    pub advertised: Vec<String>,
    pub subscribed: Vec<TopicPattern>,
}

impl NodeRegistration {
    pub fn master(node_id: impl Into<String>) -> Self {
        NodeRegistration {
            node_id: node_id.into(),
            role: NodeRole::Master,
            advertised: Vec::new(),
            subscribed: Vec::new(),
        }
    }

    pub fn slave(node_id: impl Into<String>) -> Self {
        NodeRegistration {
            node_id: node_id.into(),
            role: NodeRole::Slave,
            advertised: Vec::new(),
            subscribed: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BusError> {
        if self.node_id.is_empty() || self.node_id.chars().any(char::is_whitespace) {
            return Err(BusError::Registration(format!("invalid node id {:?}", self.node_id)));
        }
        for t in &self.advertised {
            validate_topic(t)?;
        }
        Ok(())
    }

    pub(crate) fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_str(&mut out, &self.node_id);
        out.push(match self.role {
            NodeRole::Master => 0,
            NodeRole::Slave => 1,
        });
        out.extend_from_slice(&(self.advertised.len() as u16).to_be_bytes());
        for t in &self.advertised {
            put_str(&mut out, t);
        }
        out.extend_from_slice(&(self.subscribed.len() as u16).to_be_bytes());
        for p in &self.subscribed {
            put_str(&mut out, p.as_str());
        }
        out
    }

    pub(crate) fn decode(mut b: &[u8]) -> Result<Self, BusError> {
        let bad = || BusError::Registration("malformed registration payload".into());
        let node_id = take_str(&mut b).ok_or_else(bad)?;
        let role = match take(&mut b, 1).ok_or_else(bad)?[0] {
            0 => NodeRole::Master,
            1 => NodeRole::Slave,
            _ => return Err(bad()),
        };
        let n = take_u16(&mut b).ok_or_else(bad)?;
        let mut advertised = Vec::with_capacity(n as usize);
        for _ in 0..n {
            advertised.push(take_str(&mut b).ok_or_else(bad)?);
        }
        let n = take_u16(&mut b).ok_or_else(bad)?;
        let mut subscribed = Vec::with_capacity(n as usize);
        for _ in 0..n {
            subscribed.push(TopicPattern::parse(&take_str(&mut b).ok_or_else(bad)?)?);
        }
        Ok(NodeRegistration {
            node_id,
            role,
            advertised,
            subscribed,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn take<'a>(b: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if b.len() < n {
        return None;
    }
    let (head, tail) = b.split_at(n);
    *b = tail;
    Some(head)
}

fn take_u16(b: &mut &[u8]) -> Option<u16> {
    take(b, 2).map(|s| u16::from_be_bytes([s[0], s[1]]))
}

fn take_str(b: &mut &[u8]) -> Option<String> {
    let n = take_u16(b)? as usize;
    String::from_utf8(take(b, n)?.to_vec()).ok()
}

/// Nodes known to a bus instance. At most one master.
#[derive(Debug, Default)]
pub struct Roster {
    nodes: BTreeMap<String, NodeRegistration>,
}

impl Roster {
    pub fn insert(&mut self, reg: NodeRegistration) -> Result<(), BusError> {
        reg.validate()?;
        if self.nodes.contains_key(&reg.node_id) {
            return Err(BusError::DuplicateNode(reg.node_id));
        }
        if reg.role == NodeRole::Master && self.master().is_some() {
            return Err(BusError::SecondMaster(reg.node_id));
        }
        self.nodes.insert(reg.node_id.clone(), reg);
        Ok(())
    }

    pub fn remove(&mut self, node_id: &str) -> Option<NodeRegistration> {
        self.nodes.remove(node_id)
    }

    pub fn master(&self) -> Option<&NodeRegistration> {
        self.nodes.values().find(|r| r.role == NodeRole::Master)
    }

    pub fn contains(&self, node_id: &str) -> bool {
        self.nodes.contains_key(node_id)
    }

    pub fn list(&self) -> Vec<NodeRegistration> {
        self.nodes.values().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_roundtrip() {
        let mut r = NodeRegistration::slave("pipe-1");
        r.advertised = vec!["pipeline/a/proposal".into()];
        r.subscribed = vec![TopicPattern::parse("estimator/#").unwrap()];
        assert_eq!(NodeRegistration::decode(&r.encode()).unwrap(), r);
        assert!(NodeRegistration::decode(&r.encode()[..3]).is_err());
    }

    #[test]
    fn single_master_and_unique_ids() {
        let mut roster = Roster::default();
        roster.insert(NodeRegistration::master("m")).unwrap();
        roster.insert(NodeRegistration::slave("s")).unwrap();
        assert!(matches!(
            roster.insert(NodeRegistration::master("m2")),
            Err(BusError::SecondMaster(_))
        ));
        assert!(matches!(
            roster.insert(NodeRegistration::slave("s")),
            Err(BusError::DuplicateNode(_))
        ));
        assert_eq!(roster.list().len(), 2);
    }
}
