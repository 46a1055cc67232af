//! Discrete task structure (modes, their connections, relevant features)
//! from a chat-completion endpoint or from a canned fixture.

pub mod features;

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use features::FeatureRegistry;

/// Environment variable holding the endpoint URL.
pub const ENDPOINT_VAR: &str = "MODEGROUND_LLM_URL";
/// Environment variable holding the bearer token, if the endpoint needs one.
pub const TOKEN_VAR: &str = "MODEGROUND_LLM_TOKEN";

const PROMPT_TEMPLATE: &str = include_str!("../../prompts/structure.txt");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStructure {
    /// Mode names in plan order; mode `m` is `modes[m - 1]`.
    pub modes: Vec<String>,
    /// Undirected direct connections between 1-based mode indices.
    pub adjacency: Vec<[usize; 2]>,
    pub features: Vec<String>,
}

impl TaskStructure {
    pub fn k(&self) -> usize {
        self.modes.len()
    }

    pub fn validate(&self, registry: &FeatureRegistry) -> Result<()> {
        let k = self.k();
        if k < 2 {
            return Err(Error::Validation(format!("a plan needs at least 2 modes, got {k}")));
        }
        if let Some(e) = self
            .adjacency
            .iter()
            .find(|e| e[0] < 1 || e[1] < 1 || e[0] > k || e[1] > k)
        {
            return Err(Error::Validation(format!("adjacency {e:?} references a mode outside 1..={k}")));
        }
        if self.features.is_empty() {
            return Err(Error::Validation("no features selected".into()));
        }
        registry.validate_selection(&self.features)?;
        Ok(())
    }
}

/// Where the structure comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum StructureSource {
    Fixture { path: PathBuf },
    Http {
        url: String,
        #[serde(default)]
        token: Option<String>,
        #[serde(default = "default_model")]
        model: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_model() -> String {
    "default".into()
}

fn default_timeout() -> u64 {
    60
}

impl StructureSource {
    /// HTTP source from the environment variables, if the URL is set.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENDPOINT_VAR).ok()?;
        Some(StructureSource::Http {
            url,
            token: std::env::var(TOKEN_VAR).ok(),
            model: default_model(),
            timeout_secs: default_timeout(),
        })
    }
}

/// Fills the prompt template with the task and the registry's features.
pub fn render_prompt(task: &str, registry: &FeatureRegistry) -> String {
    let listing: String = registry
        .features()
        .iter()
        .map(|f| format!("- {} ({}-dim): {}\n", f.name, f.dim, f.description))
        .collect();
    PROMPT_TEMPLATE
        .replace("{task}", task)
        .replace("{features}", listing.trim_end())
}

/// Pulls the first fenced JSON block out of a model reply and parses it.
pub fn parse_reply(text: &str) -> Result<TaskStructure> {
    let parse_err = |message: &str| Error::Parse {
        message: message.into(),
        raw: text.into(),
    };
    let open = text.find("```").ok_or_else(|| parse_err("reply has no fenced block"))?;
    let body_start = text[open + 3..]
        .find('\n')
        .map(|i| open + 3 + i + 1)
        .ok_or_else(|| parse_err("unterminated fenced block"))?;
    let close = text[body_start..]
        .find("```")
        .map(|i| body_start + i)
        .ok_or_else(|| parse_err("unterminated fenced block"))?;
    serde_json::from_str(&text[body_start..close]).map_err(|e| parse_err(&format!("fenced block is not a task structure: {e}")))
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    content: String,
}

fn ask(url: &str, token: Option<&str>, model: &str, timeout: Duration, prompt: &str) -> Result<String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let body = ChatRequest {
        model,
        messages: vec![ChatMessage { role: "user", content: prompt }],
        temperature: 0.0,
    };
    let mut req = agent.post(url);
    if let Some(t) = token {
        req = req.header("Authorization", format!("Bearer {t}"));
    }
    let resp = req.send_json(&body).map_err(|e| Error::Http(e.to_string()))?;
    let status = resp.status();
    let raw = resp
        .into_body()
        .read_to_string()
        .map_err(|e| Error::Http(e.to_string()))?;
    if !status.is_success() {
        return Err(Error::Http(format!("endpoint answered {status}: {raw}")));
    }
    let reply: ChatReply = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        message: format!("not a chat completion: {e}"),
        raw: raw.clone(),
    })?;
    reply
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| Error::Parse {
            message: "chat completion has no choices".into(),
            raw,
        })
}

/// Asks the source for the structure of `task` and validates it against
/// `registry`. Fixtures hold the reply text verbatim.
pub fn request_structure(task: &str, registry: &FeatureRegistry, source: &StructureSource) -> Result<TaskStructure> {
    let reply = match source {
        StructureSource::Fixture { path } => read_fixture(path)?,
        StructureSource::Http {
            url,
            token,
            model,
            timeout_secs,
        } => ask(
            url,
            token.as_deref(),
            model,
            Duration::from_secs(*timeout_secs),
            &render_prompt(task, registry),
        )?,
    };
    let structure = parse_reply(&reply)?;
    structure.validate(registry)?;
    Ok(structure)
}

fn read_fixture(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read fixture {}: {e}", path.display()))
    })
}

/// Fixture reply for a `K`-mode polygon chain.
pub fn nav_fixture_reply(k: usize) -> String {
    let s = TaskStructure {
        modes: (1..=k).map(|m| format!("mode{m}")).collect(),
        adjacency: crate::envs::chain_adjacency(k),
        features: vec!["x".into(), "y".into()],
    };
    fenced(&s)
}

/// Fixture reply for pick-and-place.
pub fn pickplace_fixture_reply() -> String {
    let s = TaskStructure {
        modes: vec!["reach".into(), "grasp".into(), "transport".into()],
        adjacency: crate::envs::chain_adjacency(3),
        features: vec!["ee_to_object".into(), "object_to_goal".into(), "gripper".into()],
    };
    fenced(&s)
}

fn fenced(s: &TaskStructure) -> String {
    format!(
        "```json\n{}\n```\n",
        serde_json::to_string_pretty(s).expect("task structure serializes")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn fixture(text: &str) -> (tempfile::TempDir, StructureSource) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reply.txt");
        std::fs::write(&path, text).unwrap();
        (dir, StructureSource::Fixture { path })
    }

    #[test]
    fn pickplace_fixture_gives_reach_grasp_transport() {
        let reg = FeatureRegistry::manip(crate::geometry::Vec2::new(0.7, 0.7));
        let (_d, src) = fixture(&pickplace_fixture_reply());
        let s = request_structure("pick and place", &reg, &src).unwrap();
        assert_eq!(s.modes, ["reach", "grasp", "transport"]);
        assert_eq!(s.adjacency, vec![[1, 2], [2, 3]]);
        assert_eq!(s.features, ["ee_to_object", "object_to_goal", "gripper"]);
        assert_eq!(s, request_structure("pick and place", &reg, &src).unwrap());
    }

    #[test]
    fn nav_fixture_has_k_modes() {
        let (_d, src) = fixture(&nav_fixture_reply(5));
        let s = request_structure("nav", &FeatureRegistry::nav(), &src).unwrap();
        assert_eq!(s.modes, ["mode1", "mode2", "mode3", "mode4", "mode5"]);
        assert_eq!(s.adjacency.len(), 4);
        assert_eq!(s.features, ["x", "y"]);
    }

    #[test]
    fn unknown_feature_is_a_validation_error() {
        let text = "```json\n{\"modes\":[\"a\",\"b\"],\"adjacency\":[[1,2]],\"features\":[\"z\"]}\n```";
        let (_d, src) = fixture(text);
        let err = request_structure("nav", &FeatureRegistry::nav(), &src).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_reply_keeps_the_raw_payload() {
        let err = parse_reply("modes are a then b").unwrap_err();
        match err {
            Error::Parse { raw, .. } => assert_eq!(raw, "modes are a then b"),
            other => panic!("unexpected {other}"),
        }
        assert!(parse_reply("```json\n{\"modes\": 3}\n```").is_err());
    }

    #[test]
    fn prompt_lists_every_registered_feature() {
        let reg = FeatureRegistry::manip(crate::geometry::Vec2::new(0.5, 0.5));
        let p = render_prompt("stack the block", &reg);
        assert!(p.contains("stack the block"));
        for f in reg.features() {
            assert!(p.contains(f.name));
        }
        assert!(!p.contains("{task}") && !p.contains("{features}"));
    }

    /// Serves one canned chat completion and returns the request body.
    fn serve_once(reply: String) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            String::from_utf8(body).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn http_source_round_trips_through_a_local_server() {
        let content = nav_fixture_reply(3);
        let reply = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
        let (url, handle) = serve_once(reply);
        let src = StructureSource::Http {
            url,
            token: Some("secret".into()),
            model: "m".into(),
            timeout_secs: 10,
        };
        let s = request_structure("three rooms", &FeatureRegistry::nav(), &src).unwrap();
        assert_eq!(s.k(), 3);
        let sent: serde_json::Value = serde_json::from_str(&handle.join().unwrap()).unwrap();
        assert_eq!(sent["model"], "m");
        assert!(sent["messages"][0]["content"].as_str().unwrap().contains("three rooms"));
    }
}
