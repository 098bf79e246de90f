//! Simulated secure aggregation over a 64-bit ring.
//!
//! Values are fixed-point encoded, then blinded with pairwise additive masks:
//! client i adds the (i, j) mask stream when i < j and subtracts it when
//! i > j, so the masks cancel exactly in the modular sum. The server learns
//! sums only. Mask streams are ChaCha20 keyed by a hash of (session seed,
//! pair, round tag); every round tag gets fresh masks. Full participation is
//! assumed per round tag: there is no dropout recovery, a missing share is a
//! hard error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derive_rng;

#[derive(Debug, Error)]
pub enum SecaggError {
    #[error("value at index {index} is not finite")]
    NonFinite { index: usize },
    #[error("no share received from client {client}")]
    MissingShare { client: u16 },
    #[error("more than one share from client {client}")]
    DuplicateShare { client: u16 },
    #[error("client {client} is not a session participant")]
    UnknownClient { client: u16 },
    #[error("round tag mismatch: session expected {expected}, share carries {got}")]
    RoundTagMismatch { expected: u32, got: u32 },
    #[error("share length mismatch: expected {expected} elements, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("secure sum over an empty participant set")]
    EmptyParticipants,
    #[error("frame truncated: needed {needed} bytes, got {got}")]
    TruncatedFrame { needed: usize, got: usize },
    #[error("session supports at most {0} clients")]
    TooManyClients(usize),
}

/// Fixed-point codec: reals scale by 2^frac_bits and clip to +/- clip_units
/// before entering the ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    pub frac_bits: u32,
    pub clip_units: i64,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        // 24 fractional bits, clip at 2^30 units = 64.0; fits model weights
        // and all probability-scale channels.
        Self {
            frac_bits: 24,
            clip_units: 1 << 30,
        }
    }
}

impl FixedPointCodec {
    /// Wide-range variant for raw count channels.
    pub fn for_counts() -> Self {
        Self {
            frac_bits: 24,
            clip_units: 1 << 50,
        }
    }

    /// Smallest representable step.
    pub fn resolution(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn clip_value(&self) -> f64 {
        self.clip_units as f64 / (self.frac_bits as f64).exp2()
    }

    /// Encodes one value; the bool reports clip saturation.
    pub fn encode(&self, v: f64) -> Result<(u64, bool), SecaggError> {
        if !v.is_finite() {
            return Err(SecaggError::NonFinite { index: 0 });
        }
        let scaled = (v * (self.frac_bits as f64).exp2()).round();
        let (units, saturated) = if scaled > self.clip_units as f64 {
            (self.clip_units, true)
        } else if scaled < -(self.clip_units as f64) {
            (-self.clip_units, true)
        } else {
            (scaled as i64, false)
        };
        Ok((units as u64, saturated))
    }

    pub fn encode_vec(&self, values: &[f64]) -> Result<(Vec<u64>, usize), SecaggError> {
        let mut out = Vec::with_capacity(values.len());
        let mut saturated = 0usize;
        for (index, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(SecaggError::NonFinite { index });
            }
            let (u, s) = self.encode(v)?;
            out.push(u);
            saturated += usize::from(s);
        }
        Ok((out, saturated))
    }

    /// Interprets a ring element (typically a modular sum) as a signed value.
    pub fn decode(&self, ring: u64) -> f64 {
        (ring as i64) as f64 / (self.frac_bits as f64).exp2()
    }
}

/// One client's blinded contribution for a round tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedShare {
    pub client: u16,
    pub round_tag: u32,
    pub elements: Vec<u64>,
}

/// A fixed participant set sharing pairwise mask keys.
#[derive(Debug, Clone)]
pub struct SecaggSession {
    seed: u64,
    participants: Vec<u16>,
}

impl SecaggSession {
    pub fn new(seed: u64, n_clients: usize) -> Result<Self, SecaggError> {
        if n_clients > usize::from(u16::MAX) {
            return Err(SecaggError::TooManyClients(usize::from(u16::MAX)));
        }
        Ok(Self {
            seed,
            participants: (0..n_clients as u16).collect(),
        })
    }

    /// Session over an explicit participant subset (partial participation).
    pub fn with_participants(seed: u64, participants: Vec<u16>) -> Result<Self, SecaggError> {
        if participants.is_empty() {
            return Err(SecaggError::EmptyParticipants);
        }
        let mut sorted = participants;
        sorted.sort_unstable();
        sorted.dedup();
        Ok(Self {
            seed,
            participants: sorted,
        })
    }

    pub fn participants(&self) -> &[u16] {
        &self.participants
    }

    fn pair_stream(&self, a: u16, b: u16, round_tag: u32, len: usize) -> Vec<u64> {
        use rand::RngCore;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let mut rng = derive_rng(
            self.seed,
            "pairwise-mask",
            &[u64::from(lo), u64::from(hi), u64::from(round_tag)],
        );
        (0..len).map(|_| rng.next_u64()).collect()
    }

    /// Encodes and blinds a value vector. Returns the share plus how many
    /// elements hit the clip bound (saturation is reported, not fatal).
    pub fn mask(
        &self,
        values: &[f64],
        client: u16,
        round_tag: u32,
        codec: &FixedPointCodec,
    ) -> Result<(MaskedShare, usize), SecaggError> {
        if !self.participants.contains(&client) {
            return Err(SecaggError::UnknownClient { client });
        }
        let (mut elements, saturated) = codec.encode_vec(values)?;
        if saturated > 0 {
            log::warn!(
                "client {client} round tag {round_tag}: {saturated} element(s) hit the clip bound"
            );
        }
        for &peer in &self.participants {
            if peer == client {
                continue;
            }
            let stream = self.pair_stream(client, peer, round_tag, elements.len());
            if client < peer {
                for (e, m) in elements.iter_mut().zip(&stream) {
                    *e = e.wrapping_add(*m);
                }
            } else {
                for (e, m) in elements.iter_mut().zip(&stream) {
                    *e = e.wrapping_sub(*m);
                }
            }
        }
        Ok((
            MaskedShare {
                client,
                round_tag,
                elements,
            },
            saturated,
        ))
    }

    /// Sums shares in the ring and decodes. Requires exactly one share from
    /// every participant, all with the expected round tag and equal lengths;
    /// anything else is rejected before any summing happens.
    pub fn secure_sum(
        &self,
        shares: &[MaskedShare],
        round_tag: u32,
        codec: &FixedPointCodec,
    ) -> Result<Vec<f64>, SecaggError> {
        let mut seen = vec![false; self.participants.len()];
        let expected_len = shares.first().map(|s| s.elements.len()).unwrap_or(0);
        for share in shares {
            if share.round_tag != round_tag {
                return Err(SecaggError::RoundTagMismatch {
                    expected: round_tag,
                    got: share.round_tag,
                });
            }
            if share.elements.len() != expected_len {
                return Err(SecaggError::LengthMismatch {
                    expected: expected_len,
                    got: share.elements.len(),
                });
            }
            let pos = self
                .participants
                .binary_search(&share.client)
                .map_err(|_| SecaggError::UnknownClient {
                    client: share.client,
                })?;
            if seen[pos] {
                return Err(SecaggError::DuplicateShare {
                    client: share.client,
                });
            }
            seen[pos] = true;
        }
        if let Some(pos) = seen.iter().position(|s| !s) {
            return Err(SecaggError::MissingShare {
                client: self.participants[pos],
            });
        }
        let mut acc = vec![0u64; expected_len];
        for share in shares {
            for (a, e) in acc.iter_mut().zip(&share.elements) {
                *a = a.wrapping_add(*e);
            }
        }
        Ok(acc.into_iter().map(|u| codec.decode(u)).collect())
    }
}

/// Wire layout: round tag u32 | client id u16 | element count u32 | elements
/// u64, all little endian.
pub fn encode_frame(share: &MaskedShare) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * share.elements.len());
    out.extend_from_slice(&share.round_tag.to_le_bytes());
    out.extend_from_slice(&share.client.to_le_bytes());
    out.extend_from_slice(&(share.elements.len() as u32).to_le_bytes());
    for e in &share.elements {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out
}

/// Decodes one frame from the front of the buffer; returns the share and how
/// many bytes it consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(MaskedShare, usize), SecaggError> {
    if buf.len() < 10 {
        return Err(SecaggError::TruncatedFrame {
            needed: 10,
            got: buf.len(),
        });
    }
    let round_tag = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    let client = u16::from_le_bytes(buf[4..6].try_into().unwrap());
    let count = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let needed = 10 + 8 * count;
    if buf.len() < needed {
        return Err(SecaggError::TruncatedFrame {
            needed,
            got: buf.len(),
        });
    }
    let elements = (0..count)
        .map(|i| u64::from_le_bytes(buf[10 + 8 * i..18 + 8 * i].try_into().unwrap()))
        .collect();
    Ok((
        MaskedShare {
            client,
            round_tag,
            elements,
        },
        needed,
    ))
}

/// Everything the aggregation server observes during a run.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone)]
pub enum TranscriptEntry {
    /// A blinded client upload.
    Share { channel: String, share: MaskedShare },
    /// A decoded aggregate the server computed.
    Sum {
        channel: String,
        round_tag: u32,
        values: Vec<f64>,
    },
    /// An aggregate-derived value the server pushed back to clients.
    Broadcast {
        channel: String,
        round_tag: u32,
        values: Vec<f64>,
    },
}

impl Transcript {
    pub fn record_share(&mut self, channel: &str, share: &MaskedShare) {
        self.entries.push(TranscriptEntry::Share {
            channel: channel.to_string(),
            share: share.clone(),
        });
    }

    pub fn record_sum(&mut self, channel: &str, round_tag: u32, values: &[f64]) {
        self.entries.push(TranscriptEntry::Sum {
            channel: channel.to_string(),
            round_tag,
            values: values.to_vec(),
        });
    }

    pub fn record_broadcast(&mut self, channel: &str, round_tag: u32, values: &[f64]) {
        self.entries.push(TranscriptEntry::Broadcast {
            channel: channel.to_string(),
            round_tag,
            values: values.to_vec(),
        });
    }
}

/// Ground-truth plaintext a client contributed on some channel; the audit
/// checks none of it surfaced in the transcript.
#[derive(Debug, Clone)]
pub struct ClientSecret {
    pub client: u16,
    pub channel: String,
    pub round_tag: u32,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub findings: Vec<String>,
    pub shares_checked: usize,
    pub bytes_checked: usize,
    pub chi_square: Option<ChiSquare>,
}

impl AuditReport {
    /// Significance level for the byte-uniformity test.
    pub const CHI_SQUARE_ALPHA: f64 = 0.01;

    pub fn passed(&self) -> bool {
        self.findings.is_empty()
            && self
                .chi_square
                .as_ref()
                .map(|c| c.p_value >= Self::CHI_SQUARE_ALPHA)
                .unwrap_or(true)
    }
}

/// Minimum transcript bytes before the chi-square approximation is trusted
/// (ten expected observations per bin).
const CHI_SQUARE_MIN_BYTES: usize = 2560;

/// Scans a server transcript against known client plaintexts. Two checks:
/// no share equals the fixed-point encoding of its client's secret (masks
/// present and non-degenerate), and share bytes look uniform under a
/// chi-square test, as properly masked ring elements should.
pub fn privacy_audit(
    transcript: &Transcript,
    secrets: &[ClientSecret],
    codec: &FixedPointCodec,
) -> AuditReport {
    let mut findings = Vec::new();
    let mut histogram = [0u64; 256];
    let mut shares_checked = 0usize;
    let mut bytes_checked = 0usize;

    for entry in &transcript.entries {
        let TranscriptEntry::Share { channel, share } = entry else {
            continue;
        };
        shares_checked += 1;
        for e in &share.elements {
            for b in e.to_le_bytes() {
                histogram[b as usize] += 1;
                bytes_checked += 1;
            }
        }
        for secret in secrets {
            if secret.client != share.client
                || secret.round_tag != share.round_tag
                || secret.channel != *channel
                || secret.values.len() != share.elements.len()
            {
                continue;
            }
            if let Ok((encoded, _)) = codec.encode_vec(&secret.values) {
                if encoded == share.elements {
                    findings.push(format!(
                        "client {} round tag {} channel {:?}: share equals the unmasked plaintext encoding",
                        share.client, share.round_tag, channel
                    ));
                }
            }
        }
    }

    let chi_square = if bytes_checked >= CHI_SQUARE_MIN_BYTES {
        let expected = bytes_checked as f64 / 256.0;
        let statistic: f64 = histogram
            .iter()
            .map(|&obs| {
                let diff = obs as f64 - expected;
                diff * diff / expected
            })
            .sum();
        let p_value = chi_square_sf(statistic, 255);
        if p_value < AuditReport::CHI_SQUARE_ALPHA {
            findings.push(format!(
                "share bytes fail uniformity: chi-square {statistic:.2} (df 255), p = {p_value:.5}"
            ));
        }
        Some(ChiSquare {
            statistic,
            df: 255,
            p_value,
        })
    } else {
        None
    };

    AuditReport {
        findings,
        shares_checked,
        bytes_checked,
        chi_square,
    }
}

/// Survival function of the chi-square distribution with `df` degrees of
/// freedom, via the regularized incomplete gamma function.
pub fn chi_square_sf(statistic: f64, df: u32) -> f64 {
    if statistic <= 0.0 {
        return 1.0;
    }
    reg_gamma_upper(f64::from(df) / 2.0, statistic / 2.0)
}

/// ln Gamma(x) by the Lanczos approximation (g = 7, 9 coefficients).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma Q(a, x): series for x < a + 1,
/// continued fraction (modified Lentz) otherwise.
fn reg_gamma_upper(a: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-14;
    const FPMIN: f64 = 1e-300;
    const MAX_ITER: usize = 10_000;
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        // Q = 1 - P with P from the series expansion.
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        1.0 - sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / FPMIN;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = b + an / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        (-x + a * x.ln() - ln_gamma(a)).exp() * h
    }
}
