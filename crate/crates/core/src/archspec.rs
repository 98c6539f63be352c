//! Architecture strings.
//!
//! Grammar (whitespace is ignored):
//!
//! ```text
//! spec   := [input ":"] term ("-" term)*
//! input  := C "@" T "x" H "x" W          e.g. 4@64x64x64
//! term   := C(n) | T(n,l) | P | MP3 | TPOOL(mean|max) | D(n) | R(n) | L(n) | S
//! ```
//!
//! `C(n)` is a 3x3 convolution with `n` maps, `T(n, l)` a temporal
//! convolution with `n` maps and kernel length `l`, `P` 2x2 spatial max
//! pooling, `MP3` 2x2x2 spatiotemporal max pooling, `TPOOL` pooling over all
//! frames, `D(n)` a fully connected layer, `R(n)`/`L(n)` a bidirectional
//! standard/LSTM layer and `S` the softmax classifier. A `C` directly
//! followed by a `T` is the linear spatial half of a factorized block.

use std::collections::BTreeMap;
use std::fmt;

use crate::autodiff::PoolMode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchTerm {
    Conv(usize),
    TConv { maps: usize, len: usize },
    Pool,
    Pool3d,
    TPool(PoolMode),
    Dense(usize),
    Rnn(usize),
    Lstm(usize),
    Softmax,
}

impl ArchTerm {
    pub fn tag(&self) -> &'static str {
        match self {
            ArchTerm::Conv(_) => "C",
            ArchTerm::TConv { .. } => "T",
            ArchTerm::Pool => "P",
            ArchTerm::Pool3d => "MP3",
            ArchTerm::TPool(_) => "TPOOL",
            ArchTerm::Dense(_) => "D",
            ArchTerm::Rnn(_) => "R",
            ArchTerm::Lstm(_) => "L",
            ArchTerm::Softmax => "S",
        }
    }

    /// Multiplies every width (maps, units) by `num / den`, at least 1.
    fn scaled(self, num: usize, den: usize) -> Self {
        let s = |n: usize| (n * num / den).max(1);
        match self {
            ArchTerm::Conv(n) => ArchTerm::Conv(s(n)),
            ArchTerm::TConv { maps, len } => ArchTerm::TConv { maps: s(maps), len },
            ArchTerm::Dense(n) => ArchTerm::Dense(s(n)),
            ArchTerm::Rnn(n) => ArchTerm::Rnn(s(n)),
            ArchTerm::Lstm(n) => ArchTerm::Lstm(s(n)),
            t => t,
        }
    }
}

impl fmt::Display for ArchTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ArchTerm::Conv(n) | ArchTerm::Dense(n) | ArchTerm::Rnn(n) | ArchTerm::Lstm(n) => {
                write!(f, "{}({n})", self.tag())
            }
            ArchTerm::TConv { maps, len } => write!(f, "T({maps},{len})"),
            ArchTerm::TPool(PoolMode::Mean) => f.write_str("TPOOL(mean)"),
            ArchTerm::TPool(PoolMode::Max) => f.write_str("TPOOL(max)"),
            _ => f.write_str(self.tag()),
        }
    }
}

/// Input signature: channels and `frames x height x width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputSig {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for InputSig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}x{}x{}", self.channels, self.frames, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub terms: Vec<ArchTerm>,
    pub input: Option<InputSig>,
}

impl ArchSpec {
    /// Canonical text form; `parse(render(s)) == s`.
    pub fn render(&self) -> String {
        let body = self.terms.iter().map(ToString::to_string).collect::<Vec<_>>().join("-");
        match self.input {
            Some(sig) => format!("{sig}:{body}"),
            None => body,
        }
    }

    pub fn count(&self, pred: impl Fn(&ArchTerm) -> bool) -> usize {
        self.terms.iter().filter(|t| pred(t)).count()
    }

    /// Same topology with every width scaled by `num / den`.
    pub fn scaled(&self, num: usize, den: usize) -> ArchSpec {
        ArchSpec {
            terms: self.terms.iter().map(|t| t.scaled(num, den)).collect(),
            input: self.input,
        }
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::str::FromStr for ArchSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_arch(s)
    }
}

fn perr(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

fn parse_input(text: &str) -> Result<InputSig> {
    let bad = || perr(0, format!("bad input signature '{text}', expected C@TxHxW"));
    let (c, rest) = text.split_once('@').ok_or_else(bad)?;
    let dims: Vec<&str> = rest.split(['x', 'X', '×']).collect();
    if dims.len() != 3 {
        return Err(bad());
    }
    let num = |s: &str| s.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(bad);
    Ok(InputSig {
        channels: num(c)?,
        frames: num(dims[0])?,
        height: num(dims[1])?,
        width: num(dims[2])?,
    })
}

fn parse_term(text: &str, pos: usize) -> Result<ArchTerm> {
    let (tag, args) = match text.find('(') {
        Some(i) => {
            let inner = text[i + 1..]
                .strip_suffix(')')
                .ok_or_else(|| perr(pos, format!("unbalanced parentheses in '{text}'")))?;
            (&text[..i], Some(inner))
        }
        None => (text, None),
    };
    let args: Vec<&str> = match args {
        Some("") | None => Vec::new(),
        Some(a) => a.split(',').collect(),
    };
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(perr(pos, format!("{tag} takes {n} argument(s), got {}", args.len())))
        }
    };
    let int = |i: usize| {
        args[i]
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| perr(pos, format!("{tag}: '{}' is not a positive integer", args[i])))
    };
    Ok(match tag.to_ascii_uppercase().as_str() {
        "C" => {
            arity(1)?;
            ArchTerm::Conv(int(0)?)
        }
        "T" => {
            arity(2)?;
            ArchTerm::TConv {
                maps: int(0)?,
                len: int(1)?,
            }
        }
        "P" => {
            arity(0)?;
            ArchTerm::Pool
        }
        "MP3" => {
            arity(0)?;
            ArchTerm::Pool3d
        }
        "TPOOL" => {
            arity(1)?;
            match args[0].to_ascii_lowercase().as_str() {
                "mean" => ArchTerm::TPool(PoolMode::Mean),
                "max" => ArchTerm::TPool(PoolMode::Max),
                other => return Err(perr(pos, format!("TPOOL mode must be mean or max, got '{other}'"))),
            }
        }
        "D" => {
            arity(1)?;
            ArchTerm::Dense(int(0)?)
        }
        "R" => {
            arity(1)?;
            ArchTerm::Rnn(int(0)?)
        }
        "L" => {
            arity(1)?;
            ArchTerm::Lstm(int(0)?)
        }
        "S" => {
            arity(0)?;
            ArchTerm::Softmax
        }
        _ => return Err(perr(pos, format!("unknown tag '{tag}'"))),
    })
}

/// Parses an architecture string. Error positions are 1-based term indices
/// (0 for the input signature).
pub fn parse_arch(text: &str) -> Result<ArchSpec> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let (input, body) = match compact.split_once(':') {
        Some((sig, body)) => (Some(parse_input(sig)?), body.to_string()),
        None => (None, compact),
    };
    if body.is_empty() {
        return Err(perr(1, "empty architecture"));
    }
    let mut terms = Vec::new();
    for (i, part) in body.split('-').enumerate() {
        if part.is_empty() {
            return Err(perr(i + 1, "empty term"));
        }
        terms.push(parse_term(part, i + 1)?);
    }
    let n = terms.len();
    if let Some(i) = terms.iter().position(|t| *t == ArchTerm::Softmax) {
        if i + 1 != n {
            return Err(perr(i + 1, "S must be the last term"));
        }
    } else {
        return Err(perr(n, "missing final S"));
    }
    let mut temporal_seen = None;
    for (i, t) in terms.iter().enumerate() {
        if matches!(t, ArchTerm::TPool(_) | ArchTerm::Rnn(_) | ArchTerm::Lstm(_)) {
            if let Some(prev) = temporal_seen {
                return Err(perr(i + 1, format!("{} conflicts with {} (at most one of TPOOL, R, L)", t.tag(), prev)));
            }
            temporal_seen = Some(t.tag());
        }
    }
    Ok(ArchSpec { terms, input })
}

/// Model family. Determines how time is handled and what one forward
/// pass returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Per-frame CNN, one distribution per frame.
    Single,
    /// CNN per frame, then pooling over the window; one distribution per window.
    TPool,
    /// Factorized spatiotemporal convolutions with 3-D pooling; one
    /// distribution per window.
    TConv,
    /// CNN per frame, bidirectional standard recurrence; per frame.
    Rnn,
    /// CNN per frame, bidirectional peephole LSTM; per frame.
    Lstm,
    /// Factorized convolutions with 2-D pooling, bidirectional LSTM; per frame.
    TConvLstm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Single,
        Variant::TPool,
        Variant::TConv,
        Variant::Rnn,
        Variant::Lstm,
        Variant::TConvLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::TPool => "tpool",
            Variant::TConv => "tconv",
            Variant::Rnn => "rnn",
            Variant::Lstm => "lstm",
            Variant::TConvLstm => "tconv_lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown variant '{s}' (expected one of single, tpool, tconv, rnn, lstm, tconv_lstm)")))
    }

    /// Recurrent variants emit one distribution per input frame.
    pub fn is_recurrent(self) -> bool {
        matches!(self, Variant::Rnn | Variant::Lstm | Variant::TConvLstm)
    }

    /// Window variants emit one distribution per input window.
    pub fn is_windowed(self) -> bool {
        matches!(self, Variant::TPool | Variant::TConv)
    }

    /// Checks that `spec` has the terms this variant needs and none it
    /// cannot execute.
    pub fn check(self, spec: &ArchSpec) -> Result<()> {
        let has = |tag: &str| spec.terms.iter().any(|t| t.tag() == tag);
        let (required, forbidden): (&[&str], &[&str]) = match self {
            Variant::Single => (&[], &["T", "MP3", "TPOOL", "R", "L"]),
            Variant::TPool => (&["TPOOL"], &["T", "MP3", "R", "L"]),
            Variant::TConv => (&["T", "MP3"], &["TPOOL", "R", "L"]),
            Variant::Rnn => (&["R"], &["T", "MP3", "TPOOL", "L"]),
            Variant::Lstm => (&["L"], &["T", "MP3", "TPOOL", "R"]),
            Variant::TConvLstm => (&["T", "L"], &["MP3", "TPOOL", "R"]),
        };
        if let Some(m) = required.iter().find(|t| !has(t)) {
            return Err(Error::Build(format!("variant {} requires a {m} term", self.name())));
        }
        if let Some(m) = forbidden.iter().find(|t| has(t)) {
            return Err(Error::Build(format!("variant {} cannot use a {m} term", self.name())));
        }
        Ok(())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A named architecture: spec plus the variant that executes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Builtin {
    pub spec: ArchSpec,
    pub variant: Variant,
}

/// Width divisor of the desk-scale convolution stacks (16..128 maps become 2..16).
pub const DESK_CONV_DIVISOR: usize = 8;
/// Width divisor of desk-scale dense and recurrent layers.
pub const DESK_UNIT_DIVISOR: usize = 16;
/// Frame size of desk-scale inputs.
pub const DESK_FRAME: usize = 16;

/// Fully connected width of the paper-scale pooling and convolutional models.
pub const PAPER_DENSE: usize = 2048;
pub const PAPER_LSTM_UNITS: usize = 512;
pub const PAPER_RNN_UNITS: usize = 2048;
pub const PAPER_CHANNELS: usize = 4;
pub const PAPER_FRAME: usize = 64;
/// Recurrent training fragment length.
pub const FRAGMENT_FRAMES: usize = 64;
/// Window of temporal mean pooling and of the temporal-convolution model.
pub const MEAN_POOL_WINDOW: usize = 32;
/// Window of temporal max pooling.
pub const MAX_POOL_WINDOW: usize = 16;

const CNN: &str = "C(16)-C(16)-P-C(32)-C(32)-P-C(64)-C(64)-P-C(128)-C(128)-P";

fn factorized(pool: &str, klen: usize) -> String {
    [16, 32, 64, 128]
        .iter()
        .map(|&n| format!("C({n})-T({n},{klen})-C({n})-T({n},{klen})-{pool}"))
        .collect::<Vec<_>>()
        .join("-")
}

/// The five architectures (pooling in both modes, recurrence with both cell
/// types) at full size, plus `_desk` twins.
///
/// Desk twins keep the topology, divide conv maps by [`DESK_CONV_DIVISOR`]
/// and dense/recurrent units by [`DESK_UNIT_DIVISOR`], and take one
/// 16x16 channel.
pub fn builtin_specs() -> BTreeMap<String, Builtin> {
    use crate::layers::DEFAULT_TEMPORAL_KERNEL as K;
    let d = PAPER_DENSE;
    let paper: [(&str, Variant, String, usize); 7] = [
        ("single", Variant::Single, format!("{CNN}-D({d})-D({d})-S"), 1),
        ("tpool_mean", Variant::TPool, format!("{CNN}-TPOOL(mean)-D({d})-D({d})-S"), MEAN_POOL_WINDOW),
        ("tpool_max", Variant::TPool, format!("{CNN}-TPOOL(max)-D({d})-D({d})-S"), MAX_POOL_WINDOW),
        ("tconv", Variant::TConv, format!("{}-D({d})-D({d})-S", factorized("MP3", K)), MEAN_POOL_WINDOW),
        ("rnn_std", Variant::Rnn, format!("{CNN}-R({PAPER_RNN_UNITS})-S"), FRAGMENT_FRAMES),
        ("rnn_lstm", Variant::Lstm, format!("{CNN}-L({PAPER_LSTM_UNITS})-S"), FRAGMENT_FRAMES),
        ("tconv_lstm", Variant::TConvLstm, format!("{}-L({PAPER_LSTM_UNITS})-S", factorized("P", K)), FRAGMENT_FRAMES),
    ];
    let mut out = BTreeMap::new();
    for (name, variant, body, frames) in paper {
        let mut spec = parse_arch(&body).expect("builtin architecture parses");
        spec.input = Some(InputSig {
            channels: PAPER_CHANNELS,
            frames,
            height: PAPER_FRAME,
            width: PAPER_FRAME,
        });
        let desk = ArchSpec {
            terms: spec
                .terms
                .iter()
                .map(|t| match t {
                    ArchTerm::Conv(_) | ArchTerm::TConv { .. } => t.scaled(1, DESK_CONV_DIVISOR),
                    _ => t.scaled(1, DESK_UNIT_DIVISOR),
                })
                .collect(),
            input: Some(InputSig {
                channels: 1,
                frames,
                height: DESK_FRAME,
                width: DESK_FRAME,
            }),
        };
        out.insert(format!("{name}_paper"), Builtin { spec, variant });
        out.insert(format!("{name}_desk"), Builtin { spec: desk, variant });
    }
    out
}

pub fn builtin(name: &str) -> Option<Builtin> {
    builtin_specs().remove(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SINGLE: &str = "C(16)-C(16)-P-C(32)-C(32)-P-C(64)-C(64)-P-C(128)-C(128)-P-D(2048)-D(2048)-S";

    #[test]
    fn single_frame_string() {
        let s = parse_arch(SINGLE).unwrap();
        assert_eq!(s.terms.len(), 15);
        assert_eq!(s.count(|t| matches!(t, ArchTerm::Conv(_))), 8);
        assert_eq!(s.count(|t| *t == ArchTerm::Pool), 4);
        assert_eq!(s.terms[12], ArchTerm::Dense(2048));
        assert_eq!(s.render(), SINGLE);
    }

    #[test]
    fn whitespace_is_ignored() {
        let spaced = "C(16) - C(16) - P - C(32) - C(32) - P - C(64) - C(64) - P - C(128) - C(128) - P - D(2048) - D(2048) - S";
        assert_eq!(parse_arch(spaced).unwrap(), parse_arch(SINGLE).unwrap());
    }

    #[test]
    fn bare_softmax_is_valid() {
        let s = parse_arch("S").unwrap();
        assert_eq!(s.terms, vec![ArchTerm::Softmax]);
    }

    #[test]
    fn unknown_tag_reports_position() {
        match parse_arch("C(16)-Q(2)-S") {
            Err(Error::Parse { position, message }) => {
                assert_eq!(position, 2);
                assert!(message.contains('Q'));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        let pos = |s: &str| match parse_arch(s) {
            Err(Error::Parse { position, .. }) => position,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(pos("C(16)-P"), 2);
        assert_eq!(pos("S-C(3)"), 1);
        assert_eq!(pos("C(3)-C(3,4)-S"), 2);
        assert_eq!(pos("P(2)-S"), 1);
        assert_eq!(pos("C(0)-S"), 1);
        assert_eq!(pos("C(3)-TPOOL(mean)-L(4)-S"), 3);
        assert_eq!(pos("C(3)-R(4)-L(4)-S"), 3);
        assert_eq!(pos("TPOOL(median)-S"), 1);
        assert_eq!(pos("C(3)--S"), 2);
        assert_eq!(pos("4@64x64:S"), 0);
    }

    #[test]
    fn input_signature_round_trip() {
        let s = parse_arch("4@64x64x64: C(16) - L(512) - S").unwrap();
        assert_eq!(
            s.input,
            Some(InputSig {
                channels: 4,
                frames: 64,
                height: 64,
                width: 64
            })
        );
        assert_eq!(s.render(), "4@64x64x64:C(16)-L(512)-S");
        assert_eq!(parse_arch(&s.render()).unwrap(), s);
    }

    #[test]
    fn builtins_round_trip_and_match_variants() {
        let all = builtin_specs();
        assert_eq!(all.len(), 14);
        for (name, b) in &all {
            assert_eq!(parse_arch(&b.spec.render()).unwrap(), b.spec, "{name}");
            b.variant.check(&b.spec).unwrap();
        }
    }

    #[test]
    fn paper_recurrent_widths() {
        let l = builtin("rnn_lstm_paper").unwrap();
        assert!(l.spec.terms.contains(&ArchTerm::Lstm(512)));
        let r = builtin("rnn_std_paper").unwrap();
        assert!(r.spec.terms.contains(&ArchTerm::Rnn(2048)));
        let sig = r.spec.input.unwrap();
        assert_eq!((sig.channels, sig.frames, sig.height, sig.width), (4, 64, 64, 64));
        assert_eq!(builtin("single_paper").unwrap().spec.terms, parse_arch(SINGLE).unwrap().terms);
    }

    #[test]
    fn window_lengths() {
        let frames = |n: &str| builtin(n).unwrap().spec.input.unwrap().frames;
        assert_eq!(frames("tpool_max_paper"), 16);
        assert_eq!(frames("tpool_mean_paper"), 32);
        assert_eq!(frames("tconv_paper"), 32);
        assert_eq!(frames("tconv_lstm_desk"), 64);
        assert_eq!(frames("single_desk"), 1);
    }

    #[test]
    fn desk_twins_keep_topology() {
        let all = builtin_specs();
        for (name, b) in &all {
            if let Some(base) = name.strip_suffix("_paper") {
                let desk = &all[&format!("{base}_desk")];
                let tags = |s: &ArchSpec| s.terms.iter().map(|t| t.tag()).collect::<Vec<_>>();
                assert_eq!(tags(&b.spec), tags(&desk.spec), "{base}");
            }
        }
    }

    #[test]
    fn variant_mismatch_names_missing_term() {
        let s = parse_arch(SINGLE).unwrap();
        let e = Variant::TPool.check(&s).unwrap_err().to_string();
        assert!(e.contains("TPOOL"), "{e}");
        let e = Variant::TConvLstm.check(&s).unwrap_err().to_string();
        assert!(e.contains('T'), "{e}");
    }

    fn term() -> impl Strategy<Value = ArchTerm> {
        prop_oneof![
            (1usize..300).prop_map(ArchTerm::Conv),
            (1usize..300, 1usize..9).prop_map(|(maps, len)| ArchTerm::TConv { maps, len }),
            Just(ArchTerm::Pool),
            Just(ArchTerm::Pool3d),
            (1usize..5000).prop_map(ArchTerm::Dense),
        ]
    }

    proptest! {
        #[test]
        fn render_parse_identity(
            mut terms in proptest::collection::vec(term(), 0..12),
            tail in prop_oneof![
                Just(None),
                Just(Some(ArchTerm::TPool(PoolMode::Mean))),
                Just(Some(ArchTerm::TPool(PoolMode::Max))),
                (1usize..999).prop_map(|n| Some(ArchTerm::Lstm(n))),
                (1usize..999).prop_map(|n| Some(ArchTerm::Rnn(n))),
            ],
            sig in proptest::option::of((1usize..5, 1usize..99, 1usize..99, 1usize..99)),
        ) {
            terms.extend(tail);
            terms.push(ArchTerm::Softmax);
            let spec = ArchSpec {
                terms,
                input: sig.map(|(channels, frames, height, width)| InputSig { channels, frames, height, width }),
            };
            let text = spec.render();
            let back = parse_arch(&text).unwrap();
            prop_assert_eq!(&back, &spec);
            prop_assert_eq!(back.render(), text);
        }
    }
}
