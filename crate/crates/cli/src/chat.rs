//! Interactive chat session over any line-based reader/writer, so the REPL
//! logic is testable without a terminal.
//!
//! The user is speaker 0 and the model speaker 1; history truncation to the
//! context budget happens in batch assembly (oldest turns dropped first).

use std::io::{BufRead, Write};

use anyhow::Result;
use latentchat::corpus::Turn;
use latentchat::generate::{sample_candidates, GenOptions};
use latentchat::pipeline::Pipeline;
use latentchat::tokenizer::Vocab;

pub struct ChatSession<'a> {
    pipeline: &'a Pipeline<f32>,
    vocab: &'a Vocab,
    opts: GenOptions,
    history: Vec<Turn>,
    /// sub-seed counter: every sampled candidate uses a fresh one
    next_seed: u64,
}

impl<'a> ChatSession<'a> {
    pub fn new(pipeline: &'a Pipeline<f32>, vocab: &'a Vocab, opts: GenOptions) -> Self {
        let next_seed = opts.seed;
        Self {
            pipeline,
            vocab,
            opts,
            history: Vec::new(),
            next_seed,
        }
    }

    #[cfg(test)]
    pub fn history(&self) -> &[Turn] {
        &self.history
    }

    fn generate_reply(&mut self) -> Result<String> {
        let opts = GenOptions {
            n_samples: 1,
            seed: self.next_seed,
            ..self.opts
        };
        self.next_seed = self.next_seed.wrapping_add(1);
        let out = sample_candidates(self.pipeline, self.vocab, &self.history, &opts)?;
        Ok(out.into_iter().next().unwrap_or_default())
    }

    /// Feeds one user line; returns the printable reply, or `None` to quit.
    pub fn handle_line(&mut self, line: &str) -> Result<Option<String>> {
        let line = line.trim();
        match line {
            "" => Ok(Some(String::new())),
            "/quit" | "/exit" => Ok(None),
            "/reset" => {
                self.history.clear();
                Ok(Some("(history cleared)".into()))
            }
            "/more" => {
                if self.history.last().map(|t| t.role) != Some(1) {
                    return Ok(Some("(nothing to resample; say something first)".into()));
                }
                // regenerate for the same context with a fresh latent
                self.history.pop();
                let reply = self.generate_reply()?;
                self.history.push(Turn {
                    role: 1,
                    text: reply.clone(),
                });
                Ok(Some(reply))
            }
            _ => {
                self.history.push(Turn {
                    role: 0,
                    text: line.to_string(),
                });
                let reply = self.generate_reply()?;
                self.history.push(Turn {
                    role: 1,
                    text: reply.clone(),
                });
                Ok(Some(reply))
            }
        }
    }
}

pub fn run_repl(
    session: &mut ChatSession<'_>,
    reader: impl BufRead,
    mut writer: impl Write,
) -> Result<()> {
    writeln!(
        writer,
        "chat ready: /more resamples the last reply, /reset clears history, /quit exits"
    )?;
    write!(writer, "> ")?;
    writer.flush()?;
    for line in reader.lines() {
        let line = line?;
        match session.handle_line(&line)? {
            Some(reply) => {
                if !reply.is_empty() {
                    writeln!(writer, "{reply}")?;
                }
            }
            None => break,
        }
        write!(writer, "> ")?;
        writer.flush()?;
    }
    Ok(())
}
