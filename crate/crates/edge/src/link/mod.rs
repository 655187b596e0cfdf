//! Reader link: the line protocol spoken by card readers, its server side
//! on the edge node, and an emulator for tests and simulation.

pub mod emulator;
pub mod frame;
pub mod server;
pub mod session;

pub use emulator::{emulate_reader, EmulatorError, Pace, ReaderClient, ScriptStep, Transcript};
pub use frame::{outcome_frame, AckCode, EdgeFrame, FrameError, LineDecoder, NakCode, ReaderFrame, MAX_FRAME_BYTES};
pub use server::{ReaderServer, SessionEnd, SessionReport, DEFAULT_IDLE_TIMEOUT};
pub use session::{Action, SessionMachine};
