//! Out-of-process score models.
//!
//! The engine writes one container frame per request to the child's
//! standard input: the slice block as a complex volume with the attributes
//! `t` and `first_slice`. The child answers each request with one frame of
//! the same shape on its standard output. Frames are processed strictly in
//! order, one outstanding request at a time.

use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use crate::container::{Container, ContainerError};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::types::ComplexVolume;

struct Channel {
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Score model served by a child process.
pub struct ExternalDenoiser {
    child: Child,
    channel: Mutex<Option<Channel>>,
}

impl ExternalDenoiser {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let channel = Channel { stdin: BufWriter::new(stdin), stdout: BufReader::new(stdout) };
        Ok(Self { child, channel: Mutex::new(Some(channel)) })
    }
}

impl Denoiser for ExternalDenoiser {
    fn score(&self, block: &ComplexVolume, first_slice: usize, t: usize) -> Result<ComplexVolume> {
        let request = Container::from_volume(block).with_attr("t", t).with_attr("first_slice", first_slice);
        let mut guard = self.channel.lock().map_err(|_| Error::External("denoiser channel poisoned".into()))?;
        let ch = guard.as_mut().ok_or_else(|| Error::External("denoiser channel closed".into()))?;
        request.write_to(&mut ch.stdin).map_err(|e| Error::External(format!("request failed: {e}")))?;
        let reply = Container::read_from(&mut ch.stdout).map_err(|e| Error::External(format!("bad reply: {e}")))?;
        let out = reply.to_volume().map_err(|e| Error::External(format!("bad reply: {e}")))?;
        if out.dim() != block.dim() {
            return Err(Error::External(format!("reply shape {:?} differs from request {:?}", out.dim(), block.dim())));
        }
        Ok(out)
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        // closing stdin ends the child's request loop
        if let Ok(mut g) = self.channel.lock() {
            g.take();
        }
        let _ = self.child.wait();
    }
}

/// Answers requests from `input` with `model` until the stream ends at a
/// frame boundary.
pub fn serve<R: Read, W: Write>(model: &dyn Denoiser, input: &mut R, output: &mut W) -> Result<usize> {
    let mut served = 0;
    loop {
        let req = match Container::read_from(input) {
            Ok(c) => c,
            Err(ContainerError::Truncated { what: "magic", found: 0, .. }) => return Ok(served),
            Err(e) => return Err(e.into()),
        };
        let t: usize = req.attr("t")?;
        let first: usize = req.attr_or("first_slice", 0)?;
        let block = req.to_volume()?;
        let score = model.score(&block, first, t)?;
        Container::from_volume(&score).with_attr("t", t).write_to(output)?;
        served += 1;
    }
}
