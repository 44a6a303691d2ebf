//! Domain vocabulary shared by every stage: queries, failure modes, verdicts
//! and parsed reasoning traces.

use std::fmt;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("item id must not be empty")]
    EmptyItemId,
    #[error("item {item_id}: question is empty")]
    EmptyQuestion { item_id: String },
    #[error("unsupported image media type: {0}")]
    UnsupportedMediaType(String),
    #[error("image payload is not in a supported format (png, jpeg, webp)")]
    UnrecognizedImage,
    #[error("invalid base64 image payload")]
    Base64(#[from] base64::DecodeError),
    #[error("failed to read image {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ground-truth label must be 0 or 1, got {0}")]
    BadLabel(i64),
}

/// Image formats a backend is expected to accept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaType {
    Png,
    Jpeg,
    Webp,
}

impl MediaType {
    pub fn mime(self) -> &'static str {
        match self {
            MediaType::Png => "image/png",
            MediaType::Jpeg => "image/jpeg",
            MediaType::Webp => "image/webp",
        }
    }

    pub fn from_mime(mime: &str) -> Result<Self, ModelError> {
        match mime.trim().to_ascii_lowercase().as_str() {
            "image/png" | "png" => Ok(MediaType::Png),
            "image/jpeg" | "image/jpg" | "jpeg" | "jpg" => Ok(MediaType::Jpeg),
            "image/webp" | "webp" => Ok(MediaType::Webp),
            other => Err(ModelError::UnsupportedMediaType(other.to_string())),
        }
    }

    /// Sniffs the format from magic bytes.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            Some(MediaType::Png)
        } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            Some(MediaType::Jpeg)
        } else if bytes.len() >= 12 && &bytes[0..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
            Some(MediaType::Webp)
        } else {
            None
        }
    }
}

/// An image payload held in memory. Backends receive it untouched.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageRef {
    media_type: MediaType,
    bytes: Vec<u8>,
    source: Option<PathBuf>,
}

impl fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageRef")
            .field("media_type", &self.media_type)
            .field("len", &self.bytes.len())
            .field("source", &self.source)
            .finish()
    }
}

impl ImageRef {
    /// Builds an image from raw bytes. The media type is taken from the magic
    /// bytes; a payload that matches no supported format is rejected.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ModelError> {
        let media_type = MediaType::sniff(&bytes).ok_or(ModelError::UnrecognizedImage)?;
        Ok(Self {
            media_type,
            bytes,
            source: None,
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut image = Self::from_bytes(bytes)?;
        image.source = Some(path.to_path_buf());
        Ok(image)
    }

    /// Builds an image from a base64 payload and a declared media type. The
    /// declared type must agree with the decoded bytes.
    pub fn from_base64(payload: &str, media_type: &str) -> Result<Self, ModelError> {
        let declared = MediaType::from_mime(media_type)?;
        let bytes = base64::engine::general_purpose::STANDARD.decode(payload.trim())?;
        let image = Self::from_bytes(bytes)?;
        if image.media_type != declared {
            return Err(ModelError::UnsupportedMediaType(format!(
                "declared {} but payload is {}",
                declared.mime(),
                image.media_type.mime()
            )));
        }
        Ok(image)
    }

    pub fn media_type(&self) -> MediaType {
        self.media_type
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn to_base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.bytes)
    }

    pub fn data_url(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.media_type.mime(),
            self.to_base64()
        )
    }

    /// Hex SHA-256 of the payload bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.bytes))
    }
}

/// Ground-truth subset label: 0 marks a perturbed image, 1 an original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GtLabel {
    Perturbed,
    Original,
}

impl GtLabel {
    pub fn from_int(v: i64) -> Result<Self, ModelError> {
        match v {
            0 => Ok(GtLabel::Perturbed),
            1 => Ok(GtLabel::Original),
            other => Err(ModelError::BadLabel(other)),
        }
    }

    pub fn as_int(self) -> u8 {
        match self {
            GtLabel::Perturbed => 0,
            GtLabel::Original => 1,
        }
    }
}

impl Serialize for GtLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_int())
    }
}

impl<'de> Deserialize<'de> for GtLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        GtLabel::from_int(v).map_err(serde::de::Error::custom)
    }
}

/// One image/question pair, optionally labelled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IllusionQuery {
    item_id: String,
    image: ImageRef,
    question: String,
    gt_label: Option<GtLabel>,
}

impl IllusionQuery {
    pub fn new(
        item_id: impl Into<String>,
        image: ImageRef,
        question: impl Into<String>,
        gt_label: Option<GtLabel>,
    ) -> Result<Self, ModelError> {
        let item_id = item_id.into();
        let question = question.into();
        if item_id.is_empty() {
            return Err(ModelError::EmptyItemId);
        }
        if question.trim().is_empty() {
            return Err(ModelError::EmptyQuestion { item_id });
        }
        Ok(Self {
            item_id,
            image,
            question,
            gt_label,
        })
    }

    pub fn item_id(&self) -> &str {
        &self.item_id
    }

    pub fn image(&self) -> &ImageRef {
        &self.image
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn gt_label(&self) -> Option<GtLabel> {
        self.gt_label
    }
}

/// The three systematic failure modes the constraint stages target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureMode {
    MetricHallucination,
    BackgroundInterference,
    ConfirmationBias,
}

impl FailureMode {
    pub const ALL: [FailureMode; 3] = [
        FailureMode::MetricHallucination,
        FailureMode::BackgroundInterference,
        FailureMode::ConfirmationBias,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureMode::MetricHallucination => "metric-hallucination",
            FailureMode::BackgroundInterference => "background-interference",
            FailureMode::ConfirmationBias => "confirmation-bias",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn label(self) -> u8 {
        match self {
            Answer::Yes => 1,
            Answer::No => 0,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Answer::Yes => "YES",
            Answer::No => "NO",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    Recovered,
    Unparseable,
}

/// Binary model answer together with how it was extracted.
///
/// An `Unparseable` verdict carries no answer and always scores as incorrect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Verdict {
    answer: Option<Answer>,
    parse_status: ParseStatus,
}

impl Verdict {
    pub fn answered(answer: Answer, parse_status: ParseStatus) -> Option<Self> {
        (parse_status != ParseStatus::Unparseable).then_some(Self {
            answer: Some(answer),
            parse_status,
        })
    }

    pub fn clean(answer: Answer) -> Self {
        Self {
            answer: Some(answer),
            parse_status: ParseStatus::Clean,
        }
    }

    pub fn recovered(answer: Answer) -> Self {
        Self {
            answer: Some(answer),
            parse_status: ParseStatus::Recovered,
        }
    }

    pub fn unparseable() -> Self {
        Self {
            answer: None,
            parse_status: ParseStatus::Unparseable,
        }
    }

    pub fn answer(&self) -> Option<Answer> {
        self.answer
    }

    pub fn numeric_label(&self) -> Option<u8> {
        self.answer.map(Answer::label)
    }

    pub fn parse_status(&self) -> ParseStatus {
        self.parse_status
    }

    /// Scores against a ground-truth label. Unparseable is never correct.
    pub fn is_correct(&self, gt: GtLabel) -> bool {
        self.numeric_label() == Some(gt.as_int())
    }
}

pub fn verdict_from_label(label: GtLabel) -> Verdict {
    match label {
        GtLabel::Original => Verdict::clean(Answer::Yes),
        GtLabel::Perturbed => Verdict::clean(Answer::No),
    }
}

/// Inverse of [`verdict_from_label`]; `None` for unparseable verdicts.
pub fn verdict_to_label(v: &Verdict) -> Option<GtLabel> {
    v.numeric_label().map(|l| {
        if l == 1 {
            GtLabel::Original
        } else {
            GtLabel::Perturbed
        }
    })
}

/// Parsed model output, one text field per reasoning stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub decomposition: String,
    pub initial_judgment: String,
    pub counterfactual: String,
    pub final_verdict: Verdict,
    /// Backend response exactly as received; multi-turn replies are joined
    /// with newlines.
    pub raw: String,
}

impl ReasoningTrace {
    pub fn parse_status(&self) -> ParseStatus {
        self.final_verdict.parse_status()
    }

    /// Compares every field except `raw`.
    pub fn same_content(&self, other: &ReasoningTrace) -> bool {
        self.decomposition == other.decomposition
            && self.initial_judgment == other.initial_judgment
            && self.counterfactual == other.counterfactual
            && self.final_verdict == other.final_verdict
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PNG_1X1: &[u8] = &[
        0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A, 0x1A, 0x0A, 0, 0, 0, 0x0D, 0x49, 0x48, 0x44, 0x52,
    ];

    #[test]
    fn label_mapping() {
        assert_eq!(
            verdict_from_label(GtLabel::Original),
            Verdict::clean(Answer::Yes)
        );
        assert_eq!(
            verdict_from_label(GtLabel::Original).numeric_label(),
            Some(1)
        );
        assert_eq!(
            verdict_from_label(GtLabel::Perturbed),
            Verdict::clean(Answer::No)
        );
        assert_eq!(
            verdict_from_label(GtLabel::Perturbed).numeric_label(),
            Some(0)
        );
        for v in [Verdict::clean(Answer::Yes), Verdict::clean(Answer::No)] {
            assert_eq!(verdict_from_label(verdict_to_label(&v).unwrap()), v);
        }
    }

    #[test]
    fn unparseable_is_never_correct() {
        let v = Verdict::unparseable();
        assert_eq!(v.answer(), None);
        assert!(!v.is_correct(GtLabel::Original));
        assert!(!v.is_correct(GtLabel::Perturbed));
        assert!(Verdict::answered(Answer::Yes, ParseStatus::Unparseable).is_none());
    }

    #[test]
    fn query_invariants() {
        let img = ImageRef::from_bytes(PNG_1X1.to_vec()).unwrap();
        assert!(matches!(
            IllusionQuery::new("", img.clone(), "q?", None),
            Err(ModelError::EmptyItemId)
        ));
        assert!(matches!(
            IllusionQuery::new("a", img.clone(), "  \n", None),
            Err(ModelError::EmptyQuestion { .. })
        ));
        assert!(IllusionQuery::new("a", img, "q?", Some(GtLabel::Original)).is_ok());
    }

    #[test]
    fn media_sniffing() {
        assert_eq!(MediaType::sniff(PNG_1X1), Some(MediaType::Png));
        assert_eq!(
            MediaType::sniff(&[0xFF, 0xD8, 0xFF, 0xE0]),
            Some(MediaType::Jpeg)
        );
        assert_eq!(
            MediaType::sniff(b"RIFF\0\0\0\0WEBPVP8 "),
            Some(MediaType::Webp)
        );
        assert_eq!(MediaType::sniff(b"GIF89a"), None);
        assert!(matches!(
            ImageRef::from_bytes(b"GIF89a".to_vec()),
            Err(ModelError::UnrecognizedImage)
        ));
    }

    #[test]
    fn base64_payload_must_match_declared_type() {
        let b64 = base64::engine::general_purpose::STANDARD.encode(PNG_1X1);
        assert!(ImageRef::from_base64(&b64, "image/png").is_ok());
        assert!(ImageRef::from_base64(&b64, "image/jpeg").is_err());
        assert!(ImageRef::from_base64(&b64, "image/gif").is_err());
    }

    #[test]
    fn label_domain() {
        assert!(GtLabel::from_int(2).is_err());
        assert_eq!(GtLabel::from_int(0).unwrap(), GtLabel::Perturbed);
    }

    #[test]
    fn core_types_are_send_and_sync() {
        fn check<T: Send + Sync>() {}
        check::<IllusionQuery>();
        check::<ReasoningTrace>();
        check::<Verdict>();
    }
}
