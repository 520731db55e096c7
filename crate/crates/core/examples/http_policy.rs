//! Talk to an OpenAI-compatible chat-completions endpoint. A tiny in-process
//! server stands in for the real one; point `endpoint` at vLLM or any other
//! compatible server instead.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;

use strategy_distill::policy::{ConnectOptions, GenerationRequest, PolicyHandle, PolicyRole, Transport};

/// Answers `requests` calls with a canned completion that stopped at `</code>`.
fn mock_server(requests: usize) -> std::io::Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    thread::spawn(move || {
        for stream in listener.incoming().take(requests).flatten() {
            let mut reader = BufReader::new(stream);
            let mut length = 0;
            let mut line = String::new();
            while reader.read_line(&mut line).unwrap_or(0) > 2 {
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
                line.clear();
            }
            let mut body = vec![0; length];
            let _ = reader.read_exact(&mut body);
            let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
            eprintln!("server got: model={} stop={}", request["model"], request["stop"]);
            let reply = serde_json::json!({
                "choices": [{
                    "message": {"role": "assistant", "content": "<think>Enumerate.</think><code>print(len(range(7)))"},
                    "finish_reason": "stop",
                    "stop_reason": "</code>"
                }],
                "usage": {"completion_tokens": 5}
            })
            .to_string();
            let mut stream = reader.into_inner();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    Ok(format!("http://{addr}/v1"))
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let handle = PolicyHandle {
        name: "agentic".into(),
        role: PolicyRole::Agentic,
        transport: Transport::Http {
            endpoint: mock_server(1)?,
            model: "agent-7b".into(),
            // the token is read from this variable at call time, never stored
            auth_env: None,
            max_output_tokens: 32_768,
            parallelism: 4,
        },
    };
    let policy = handle.connect(&ConnectOptions::default())?;
    let request = GenerationRequest::new("How many integers in [0, 7)?", 1024)
        .with_stop(["</code>"])
        .with_seed(1);
    let out = policy.generate(&request)?;
    println!("finish={:?} tokens={} text={:?}", out.finish, out.tokens_used, out.text);
    println!("{}", serde_json::to_string(&handle)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
