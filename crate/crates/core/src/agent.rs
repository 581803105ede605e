//! A single device's agent: monitors a control-flow trace, trains its local
//! model, contributes it to the shared ledger, and adopts global models as
//! blocks close.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use crate::chain::crypto::{KeyPair, Keyring, SignatureProvider};
use crate::chain::{AgentId, Block, Chain, Fault, ProtocolParams, ReceiveState, ReportReason, Verifier};
use crate::emm::{state_of_address, FrequencyMatrix, ModelParams, ScoreWindow, State};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlertKind {
    Anomaly,
    RejectedBlock,
    RejectedAgent,
}

impl AlertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AlertKind::Anomaly => "anomaly",
            AlertKind::RejectedBlock => "rejected_block",
            AlertKind::RejectedAgent => "rejected_agent",
        }
    }
}

impl fmt::Display for AlertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alert {
    pub ts: f64,
    pub agent_id: AgentId,
    pub kind: AlertKind,
    /// Window score for anomalies, model distance for attestation rejections.
    pub score: Option<f64>,
    pub src_state: Option<State>,
    pub dst_state: Option<State>,
    pub detail: String,
}

impl Alert {
    pub const CSV_HEADER: &'static str = "ts,agent_id,kind,score,src_state,dst_state,detail";

    /// Alert for a reported chain. Invalid content blames the block,
    /// a failed attestation blames the sending agent.
    pub fn from_report(ts: f64, agent_id: AgentId, sender: AgentId, reason: &ReportReason) -> Self {
        let (kind, score) = match reason {
            ReportReason::Attestation { distance } => (AlertKind::RejectedAgent, Some(*distance)),
            _ => (AlertKind::RejectedBlock, None),
        };
        Alert {
            ts,
            agent_id,
            kind,
            score,
            src_state: None,
            dst_state: None,
            detail: format!("sender={sender} reason={reason}"),
        }
    }

    /// One CSV line without a trailing newline. Commas and quotes in
    /// `detail` are escaped by quoting.
    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let detail = if self.detail.contains([',', '"', '\n']) {
            format!("\"{}\"", self.detail.replace('"', "\"\""))
        } else {
            self.detail.clone()
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.ts,
            self.agent_id,
            self.kind,
            opt(self.score.map(|s| s.to_string())),
            opt(self.src_state.map(|s| s.to_string())),
            opt(self.dst_state.map(|s| s.to_string())),
            detail
        )
    }
}

/// Destination for alerts.
pub trait AlertSink {
    fn emit(&mut self, alert: &Alert);
}

impl AlertSink for Vec<Alert> {
    fn emit(&mut self, alert: &Alert) {
        self.push(alert.clone());
    }
}

/// Writes alerts as CSV lines.
pub struct CsvAlertSink<W: Write> {
    out: W,
}

impl<W: Write> CsvAlertSink<W> {
    pub fn new(mut out: W, header: bool) -> std::io::Result<Self> {
        if header {
            writeln!(out, "{}", Alert::CSV_HEADER)?;
        }
        Ok(Self { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> AlertSink for CsvAlertSink<W> {
    fn emit(&mut self, alert: &Alert) {
        if let Err(e) = writeln!(self.out, "{}", alert.to_csv_line()) {
            log::error!("failed to write alert: {e}");
        }
    }
}

/// Sends alerts to the `log` facade at warn level.
pub struct LogAlertSink;

impl AlertSink for LogAlertSink {
    fn emit(&mut self, alert: &Alert) {
        log::warn!("{}", alert.to_csv_line());
    }
}

/// One monitored transition, as reported to [`AgentState::monitor_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorStep {
    /// Position of the address in the batch.
    pub index: usize,
    pub src: State,
    pub dst: State,
    /// Probability of this transition under the local model before the update.
    pub prob: f64,
    /// Window mean after pushing `prob`.
    pub score: f64,
    pub alerted: bool,
}

/// What happened during a share event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ShareOutcome {
    pub contributed: bool,
    pub closed_block: bool,
}

#[derive(Clone)]
pub struct AgentState {
    pub id: AgentId,
    /// Locator other agents use for direct messages.
    pub address: String,
    pub keys: KeyPair,
    pub local_model: FrequencyMatrix,
    pub window: ScoreWindow,
    pub current_state: Option<State>,
    pub params: ModelParams,
    pub protocol: ProtocolParams,
    pub chain: Arc<Chain>,
    pub start_time: f64,
    pub receive: ReceiveState,
    pub provider: Arc<dyn SignatureProvider>,
    pub keyring: Arc<Keyring>,
}

impl fmt::Debug for AgentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentState")
            .field("id", &self.id)
            .field("address", &self.address)
            .field("model_entries", &self.local_model.len())
            .field("current_state", &self.current_state)
            .field("chain_len", &self.chain.len())
            .field("partial_len", &self.chain.partial.len())
            .finish_non_exhaustive()
    }
}

pub struct AgentBuilder {
    id: AgentId,
    keys: KeyPair,
    provider: Arc<dyn SignatureProvider>,
    keyring: Arc<Keyring>,
    params: ModelParams,
    protocol: ProtocolParams,
    address: Option<String>,
    chain: Option<Chain>,
    start_time: f64,
    model: FrequencyMatrix,
}

impl AgentBuilder {
    pub fn params(mut self, params: ModelParams) -> Self {
        self.params = params;
        self
    }

    pub fn protocol(mut self, protocol: ProtocolParams) -> Self {
        self.protocol = protocol;
        self
    }

    pub fn address(mut self, address: impl Into<String>) -> Self {
        self.address = Some(address.into());
        self
    }

    pub fn chain(mut self, chain: Chain) -> Self {
        self.chain = Some(chain);
        self
    }

    pub fn start_time(mut self, t: f64) -> Self {
        self.start_time = t;
        self
    }

    /// Starts from an already trained model instead of an empty one.
    pub fn model(mut self, model: FrequencyMatrix) -> Self {
        self.model = model;
        self
    }

    pub fn build(self) -> Result<AgentState> {
        self.params.validate()?;
        self.protocol.validate()?;
        if !self.keyring.contains_key(&self.id) {
            return Err(Error::InvalidInput(format!(
                "agent {} has no entry in the keyring",
                self.id
            )));
        }
        Ok(AgentState {
            id: self.id,
            address: self.address.unwrap_or_else(|| format!("agent-{}", self.id)),
            keys: self.keys,
            local_model: self.model,
            window: ScoreWindow::new(self.params.window_k),
            current_state: None,
            receive: ReceiveState::new(&self.protocol),
            protocol: self.protocol,
            chain: Arc::new(self.chain.unwrap_or_else(|| Chain::genesis("app", "1"))),
            start_time: self.start_time,
            params: self.params,
            provider: self.provider,
            keyring: self.keyring,
        })
    }
}

impl AgentState {
    pub fn builder(
        id: AgentId,
        keys: KeyPair,
        provider: Arc<dyn SignatureProvider>,
        keyring: Arc<Keyring>,
    ) -> AgentBuilder {
        AgentBuilder {
            id,
            keys,
            provider,
            keyring,
            params: ModelParams::default(),
            protocol: ProtocolParams::default(),
            address: None,
            chain: None,
            start_time: 0.0,
            model: FrequencyMatrix::new(),
        }
    }

    pub fn verifier(&self) -> Verifier<'_> {
        Verifier {
            keyring: &self.keyring,
            provider: self.provider.as_ref(),
        }
    }

    /// True while the agent is still in its initial learning period.
    pub fn in_grace(&self, now: f64) -> bool {
        now - self.start_time < self.params.t_grace_secs
    }

    /// Runs the monitor over a batch of addresses and returns the alerts.
    pub fn monitor_batch(&mut self, addresses: &[u64], now: f64) -> Vec<Alert> {
        self.monitor_with(addresses, now, |_| {})
    }

    /// As [`monitor_batch`](Self::monitor_batch), reporting every scored
    /// transition to `on_step`.
    ///
    /// Each transition's probability under the current model is pushed into
    /// the score window. Outside the grace period, a window mean below
    /// `p_thr` raises an alert and the transition is not learned. The current
    /// state always advances.
    pub fn monitor_with(
        &mut self,
        addresses: &[u64],
        now: f64,
        mut on_step: impl FnMut(MonitorStep),
    ) -> Vec<Alert> {
        let mut alerts = Vec::new();
        let armed = !self.in_grace(now);
        for (index, &addr) in addresses.iter().enumerate() {
            let dst = state_of_address(addr, self.params.region_size_bytes)
                .expect("region size validated at construction");
            if let Some(src) = self.current_state {
                let prob = self.local_model.transition_prob(src, dst);
                self.window.push(prob);
                let score = self.window.average().expect("window is non-empty after push");
                let alerted = armed && score < self.params.p_thr;
                if alerted {
                    alerts.push(Alert {
                        ts: now,
                        agent_id: self.id,
                        kind: AlertKind::Anomaly,
                        score: Some(score),
                        src_state: Some(src),
                        dst_state: Some(dst),
                        detail: format!("index={index}"),
                    });
                } else {
                    self.local_model.record_transition(src, dst);
                }
                on_step(MonitorStep {
                    index,
                    src,
                    dst,
                    prob,
                    score,
                    alerted,
                });
            }
            self.current_state = Some(dst);
        }
        alerts
    }

    /// Replaces the local model with the combined model of a valid closed
    /// block and clears the score window.
    pub fn adopt_global(&mut self, block: &Block) -> Result<(), Fault> {
        block.validate(self.protocol.block_size, self.verifier())?;
        self.adopt_unchecked(block);
        Ok(())
    }

    pub(crate) fn adopt_unchecked(&mut self, block: &Block) {
        self.local_model = block
            .combined_model(self.params.p_a)
            .expect("validated block has records and p_a is in range");
        self.window.clear();
    }

    /// Adds this agent's signed model to its partial block once the grace
    /// period has passed, unless it already has a record there.
    pub fn contribute_record(&mut self, now: f64) -> Result<bool> {
        if self.in_grace(now) || self.chain.partial.contains(self.id) {
            return Ok(false);
        }
        let chain = Arc::make_mut(&mut self.chain);
        chain.partial.append_signed(
            self.id,
            &self.address,
            self.local_model.clone(),
            &self.keys.secret,
            self.provider.as_ref(),
        )?;
        Ok(true)
    }

    /// The periodic share event: contribute a record, close the partial
    /// block if that filled it, and adopt the resulting global model. The
    /// caller then sends [`chain`](Self::chain) to its peers.
    pub fn share(&mut self, now: f64) -> Result<ShareOutcome> {
        self.receive.start_interval();
        let contributed = self.contribute_record(now)?;
        let closed = Arc::make_mut(&mut self.chain)
            .close_if_full(self.protocol.block_size)
            .cloned();
        if let Some(block) = &closed {
            self.adopt_unchecked(block);
        }
        Ok(ShareOutcome {
            contributed,
            closed_block: closed.is_some(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::crypto::KeyedHashSigner;

    fn agent_with(params: ModelParams) -> AgentState {
        let provider: Arc<dyn SignatureProvider> = Arc::new(KeyedHashSigner);
        let keys = provider.keypair_from_seed(1);
        let ring: Keyring = [(AgentId(1), keys.public.clone())].into();
        AgentState::builder(AgentId(1), keys, provider, Arc::new(ring))
            .params(params)
            .protocol(ProtocolParams {
                block_size: 2,
                ..ProtocolParams::default()
            })
            .build()
            .unwrap()
    }

    fn small_params(t_grace: f64) -> ModelParams {
        ModelParams {
            window_k: 4,
            t_grace_secs: t_grace,
            ..ModelParams::paper()
        }
    }

    // region 0 and region 1 with B = 256
    const LOOP: [u64; 8] = [0x10, 0x110, 0x20, 0x120, 0x30, 0x130, 0x40, 0x140];

    #[test]
    fn grace_suppresses_alerts_and_learns_everything() {
        let mut a = agent_with(small_params(100.0));
        let alerts = a.monitor_batch(&[0x0, 0x500, 0x900, 0x0], 0.0);
        assert!(alerts.is_empty());
        assert_eq!(a.local_model.count(0, 5), 1);
        assert_eq!(a.local_model.count(5, 9), 1);
        assert_eq!(a.local_model.count(9, 0), 1);
    }

    #[test]
    fn unseen_region_alerts_without_learning() {
        let mut a = agent_with(small_params(10.0));
        a.monitor_batch(&LOOP, 0.0);
        let total = a.local_model.total_count();
        let attack = [0x7000, 0x7100, 0x7200, 0x7300, 0x7400];
        let alerts = a.monitor_batch(&attack, 20.0);
        assert!(!alerts.is_empty());
        for al in &alerts {
            assert_eq!(al.kind, AlertKind::Anomaly);
            assert!(al.score.unwrap() < a.params.p_thr);
            assert_eq!(a.local_model.count(al.src_state.unwrap(), al.dst_state.unwrap()), 0);
        }
        assert!(a.local_model.total_count() < total + attack.len() as u64);
        assert_eq!(a.current_state, Some(0x74));
    }

    #[test]
    fn training_loop_does_not_alert() {
        let mut a = agent_with(small_params(10.0));
        a.monitor_batch(&LOOP, 0.0);
        assert!(a.monitor_batch(&LOOP, 20.0).is_empty());
    }

    #[test]
    fn grace_boundaries() {
        let a = agent_with(small_params(10.0));
        assert!(a.in_grace(0.0));
        assert!(!a.in_grace(10.0));
        assert!(!agent_with(small_params(0.0)).in_grace(0.0));
    }

    #[test]
    fn contribute_once_and_not_in_grace() {
        let mut a = agent_with(small_params(10.0));
        a.monitor_batch(&LOOP, 0.0);
        assert!(!a.contribute_record(5.0).unwrap());
        assert!(a.contribute_record(10.0).unwrap());
        assert!(!a.contribute_record(11.0).unwrap());
        assert_eq!(a.chain.partial.len(), 1);
        assert_eq!(a.chain.partial.validate(2, a.verifier()), Ok(()));
    }

    #[test]
    fn alert_csv_line() {
        let al = Alert {
            ts: 1.5,
            agent_id: AgentId(3),
            kind: AlertKind::Anomaly,
            score: Some(0.25),
            src_state: Some(1),
            dst_state: Some(9),
            detail: "a,b".into(),
        };
        assert_eq!(al.to_csv_line(), "1.5,3,anomaly,0.25,1,9,\"a,b\"");
        let mut sink = CsvAlertSink::new(Vec::new(), true).unwrap();
        sink.emit(&al);
        let text = String::from_utf8(sink.into_inner()).unwrap();
        assert!(text.starts_with(Alert::CSV_HEADER));
    }
}
