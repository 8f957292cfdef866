//! Contract test for the HTTP transcription client's retry behaviour against
//! a real local socket.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use latentspeech::dsp::wav::Waveform;
use latentspeech::eval::asr::{HttpAsrClient, TranscriptionClient};
use latentspeech::LsError;

fn serve(listener: TcpListener, responses: Vec<(u16, String)>) -> std::thread::JoinHandle<usize> {
    std::thread::spawn(move || {
        let mut served = 0;
        for (status, body) in responses {
            let (mut sock, _) = match listener.accept() {
                Ok(x) => x,
                Err(_) => break,
            };
            let mut buf = [0u8; 4096];
            let _ = sock.read(&mut buf);
            let reason = if status == 200 { "OK" } else { "Internal Server Error" };
            let resp = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = sock.write_all(resp.as_bytes());
            served += 1;
        }
        served
    })
}

fn clip() -> Waveform {
    Waveform::new(vec![0.0; 480], 48_000)
}

#[test]
fn http_500_three_times_surfaces_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = serve(
        listener,
        vec![
            (500, "boom".into()),
            (500, "boom".into()),
            (500, "boom".into()),
        ],
    );
    let client = HttpAsrClient {
        url,
        token: None,
        retries: 3,
        timeout: Duration::from_secs(5),
        backoff: Duration::from_millis(1),
    };
    let err = client.transcribe("a", &clip()).unwrap_err();
    assert!(
        matches!(err, LsError::Transport { retries: 3, .. }),
        "got {err:?}"
    );
    assert_eq!(handle.join().unwrap(), 3, "expected exactly three attempts");
}

#[test]
fn recovers_on_second_attempt() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = serve(
        listener,
        vec![
            (500, "boom".into()),
            (200, "ni3 hao3".into()),
        ],
    );
    let client = HttpAsrClient {
        url,
        token: None,
        retries: 3,
        timeout: Duration::from_secs(5),
        backoff: Duration::from_millis(1),
    };
    let text = client.transcribe("a", &clip()).unwrap();
    assert_eq!(text, "ni3 hao3");
    assert_eq!(handle.join().unwrap(), 2);
}
