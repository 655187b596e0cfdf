use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{Local, NaiveDate, NaiveTime};
use clap::{Args, Parser, Subcommand};
use rollcall_central::api::{AttendanceQuery, CreateUserRequest, EnrollCardRequest, StudentsQuery, SummaryQuery};
use rollcall_central::client::{CentralClient, ClientError};
use rollcall_central::config::CentralConfig;
use rollcall_central::CentralRuntime;
use rollcall_cli::sim::{self, SimConfig};
use rollcall_core::{AttendanceStatus, CardState, CardUid, NewStudent, Role, StudentCode};
use rollcall_edge::{EdgeConfig, EdgeRuntime};

#[derive(Parser)]
#[command(name = "rollcall", version, about = "School attendance: edge node, central service, simulator and tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an edge node: reader listener, closure scheduler, sync loop.
    Edge {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the central API service.
    Central {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an accelerated school morning and compare it to the oracle.
    Simulate(SimulateArgs),
    /// Manage users, students and cards through the central API.
    Admin {
        #[command(flatten)]
        conn: Conn,
        #[command(subcommand)]
        cmd: AdminCmd,
    },
    /// Attendance summaries and CSV export.
    Report {
        #[command(flatten)]
        conn: Conn,
        #[command(subcommand)]
        cmd: ReportCmd,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    students: usize,
    #[arg(long, default_value_t = 1)]
    readers: usize,
    /// School day to simulate; defaults to the next weekday from today.
    #[arg(long)]
    day: Option<NaiveDate>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Virtual seconds per wall second. Omit to run unpaced.
    #[arg(long)]
    speed: Option<f64>,
    /// Sync link outage, local time, e.g. 07:40..08:20.
    #[arg(long, value_parser = sim::parse_partition)]
    partition: Option<(NaiveTime, NaiveTime)>,
}

#[derive(Args)]
struct Conn {
    #[arg(long, env = "ROLLCALL_URL", default_value = "http://127.0.0.1:8080")]
    url: String,
    #[arg(long, env = "ROLLCALL_USER")]
    user: String,
    #[arg(long, env = "ROLLCALL_PASSWORD", hide_env_values = true)]
    password: String,
}

#[derive(Subcommand)]
enum AdminCmd {
    #[command(subcommand)]
    User(UserCmd),
    #[command(subcommand)]
    Student(StudentCmd),
    #[command(subcommand)]
    Card(CardCmd),
}

#[derive(Subcommand)]
enum UserCmd {
    Create {
        #[arg(long)]
        username: String,
        #[arg(long)]
        password: String,
        /// admin, auxiliary, teacher or student
        #[arg(long)]
        role: Role,
        /// Own record, for the student role.
        #[arg(long)]
        student_code: Option<StudentCode>,
        /// Teacher assignment such as 3B; repeatable.
        #[arg(long = "section")]
        sections: Vec<String>,
    },
}

#[derive(Subcommand)]
enum StudentCmd {
    Add {
        #[arg(long)]
        given: String,
        #[arg(long)]
        family: String,
        #[arg(long)]
        year: i32,
        #[arg(long)]
        grade: u8,
        #[arg(long)]
        section: char,
        #[arg(long, default_value = "")]
        contact: String,
    },
    List {
        #[arg(long)]
        grade: Option<u8>,
        #[arg(long)]
        section: Option<char>,
    },
}

#[derive(Subcommand)]
enum CardCmd {
    Enroll {
        #[arg(long)]
        uid: CardUid,
        #[arg(long)]
        student: StudentCode,
    },
    Block { uid: CardUid },
    Unblock { uid: CardUid },
    List {
        #[arg(long)]
        student: Option<StudentCode>,
    },
}

#[derive(Args)]
struct Filter {
    #[arg(long)]
    from: Option<NaiveDate>,
    #[arg(long)]
    to: Option<NaiveDate>,
    #[arg(long)]
    grade: Option<u8>,
    #[arg(long)]
    section: Option<char>,
    #[arg(long)]
    student: Option<StudentCode>,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Prints the summary as JSON.
    Summary {
        /// institution, grade, section or student
        #[arg(long, default_value = "institution")]
        scope: String,
        /// day, week, month or range
        #[arg(long, default_value = "day")]
        period: String,
        #[arg(long)]
        date: Option<NaiveDate>,
        #[command(flatten)]
        filter: Filter,
    },
    /// Writes the CSV export to stdout or a file.
    Export {
        #[command(flatten)]
        filter: Filter,
        #[arg(long)]
        status: Option<AttendanceStatus>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

/// Command failures, by exit code.
enum Failure {
    Usage(String),
    Runtime(String),
    Mismatch,
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn api_err(url: &str) -> impl Fn(ClientError) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{url}: {e}"))
}

fn next_weekday() -> NaiveDate {
    let policy = rollcall_core::TimeWindowPolicy::default();
    let mut d = Local::now().date_naive();
    while !policy.is_school_day(d) {
        d = d.succ_opt().unwrap_or(d);
    }
    d
}

fn print_json(v: &impl serde::Serialize) -> Result<(), Failure> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{s}");
    Ok(())
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

async fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Edge { config } => {
            let cfg = EdgeConfig::load(&config).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
            let rt = EdgeRuntime::start(cfg).await.map_err(|e| Failure::Runtime(e.to_string()))?;
            match rt.reader_addr {
                Some(addr) => println!("reader listening on {addr}"),
                None => println!("reader listening on serial device"),
            }
            std::io::stdout().flush()?;
            shutdown_signal().await;
            rt.shutdown().await;
            Ok(())
        }
        Cmd::Central { config } => {
            let cfg = CentralConfig::load(&config).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
            let mut rt = CentralRuntime::start(&cfg).await.map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("central listening on {}", rt.base_url());
            std::io::stdout().flush()?;
            tokio::select! {
                r = rt.wait() => r?,
                _ = shutdown_signal() => rt.shutdown().await,
            }
            Ok(())
        }
        Cmd::Simulate(a) => {
            let mut cfg = SimConfig::new(a.students, a.readers, a.day.unwrap_or_else(next_weekday), a.seed);
            if let Some(x) = a.speed {
                if !(x.is_finite() && x > 0.0) {
                    return Err(Failure::Usage(format!("--speed must be positive, got {x}")));
                }
            }
            cfg.speed = a.speed;
            cfg.partition = a.partition;
            let out = sim::run(&cfg).await.map_err(|e| match e {
                sim::SimError::Setup(m) => Failure::Runtime(m),
                other => Failure::Usage(other.to_string()),
            })?;
            print!("{}", out.report);
            let mut sorted = out.latencies.clone();
            sorted.sort();
            eprintln!(
                "scan round trip: p50 {:?}, p99 {:?}, max {:?}; wall {:?}",
                sim::percentile(&sorted, 50.0),
                sim::percentile(&sorted, 99.0),
                sorted.last().copied().unwrap_or_default(),
                out.wall
            );
            if out.passed() {
                Ok(())
            } else {
                Err(Failure::Mismatch)
            }
        }
        Cmd::Admin { conn, cmd } => {
            let client = connect(&conn).await?;
            let e = api_err(&conn.url);
            match cmd {
                AdminCmd::User(UserCmd::Create {
                    username,
                    password,
                    role,
                    student_code,
                    sections,
                }) => print_json(
                    &client
                        .create_user(&CreateUserRequest {
                            username,
                            password,
                            role,
                            student_code,
                            sections,
                        })
                        .await
                        .map_err(e)?,
                ),
                AdminCmd::Student(StudentCmd::Add {
                    given,
                    family,
                    year,
                    grade,
                    section,
                    contact,
                }) => print_json(
                    &client
                        .create_student(&NewStudent {
                            given_names: given,
                            family_names: family,
                            enrollment_year: year,
                            grade,
                            section,
                            emergency_contact: contact,
                        })
                        .await
                        .map_err(e)?,
                ),
                AdminCmd::Student(StudentCmd::List { grade, section }) => {
                    print_json(&client.list_students(&StudentsQuery { grade, section }).await.map_err(e)?)
                }
                AdminCmd::Card(CardCmd::Enroll { uid, student }) => print_json(
                    &client
                        .enroll_card(&EnrollCardRequest {
                            uid,
                            student_code: student,
                        })
                        .await
                        .map_err(e)?,
                ),
                AdminCmd::Card(CardCmd::Block { uid }) => {
                    print_json(&client.set_card_state(uid, CardState::Blocked).await.map_err(e)?)
                }
                AdminCmd::Card(CardCmd::Unblock { uid }) => {
                    print_json(&client.set_card_state(uid, CardState::Active).await.map_err(e)?)
                }
                AdminCmd::Card(CardCmd::List { student }) => print_json(
                    &client
                        .list_cards(&rollcall_central::api::CardsQuery { student })
                        .await
                        .map_err(e)?,
                ),
            }
        }
        Cmd::Report { conn, cmd } => {
            let client = connect(&conn).await?;
            let e = api_err(&conn.url);
            match cmd {
                ReportCmd::Summary {
                    scope,
                    period,
                    date,
                    filter,
                } => print_json(
                    &client
                        .summary(&SummaryQuery {
                            scope: Some(scope),
                            grade: filter.grade,
                            section: filter.section,
                            student: filter.student,
                            period: Some(period),
                            date,
                            from: filter.from,
                            to: filter.to,
                        })
                        .await
                        .map_err(e)?,
                ),
                ReportCmd::Export { filter, status, output } => {
                    let csv = client
                        .export_csv(&AttendanceQuery {
                            from: filter.from,
                            to: filter.to,
                            grade: filter.grade,
                            section: filter.section,
                            student: filter.student,
                            status,
                            ..Default::default()
                        })
                        .await
                        .map_err(e)?;
                    match output {
                        Some(path) => File::create(&path)
                            .and_then(|mut f| f.write_all(csv.as_bytes()))
                            .map_err(|err| Failure::Runtime(format!("{}: {err}", path.display())))?,
                        None => std::io::stdout().write_all(csv.as_bytes())?,
                    }
                    Ok(())
                }
            }
        }
    }
}

async fn connect(conn: &Conn) -> Result<CentralClient, Failure> {
    let mut client = CentralClient::new(conn.url.trim_end_matches('/'));
    client.login(&conn.user, &conn.password).await.map_err(api_err(&conn.url))?;
    Ok(client)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("ROLLCALL_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("rollcall: {e}");
            return ExitCode::from(1);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch) => ExitCode::from(1),
        Err(Failure::Runtime(m)) => {
            eprintln!("rollcall: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("rollcall: {m}");
            ExitCode::from(2)
        }
    }
}
