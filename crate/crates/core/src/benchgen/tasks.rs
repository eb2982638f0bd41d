//! Bundled pool of synthetic tasks with scripted tool responses.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::sim::{ParamType, ToolRegistry, ToolSpec};

/// A prompt plus the tools that can answer it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub task_id: String,
    pub prompt: String,
    pub tools: ToolRegistry,
}

impl TaskTemplate {
    /// Number of steps a clean run calls, one per capability.
    pub fn n_steps(&self) -> usize {
        self.tools.steps().len()
    }

    pub fn hash(&self) -> u64 {
        crate::seed::hash_str(&format!("{}\n{}", self.task_id, self.prompt))
    }
}

struct Capability {
    name: &'static str,
    phrase: &'static str,
    param: &'static str,
    value: &'static str,
    response: fn() -> Value,
}

const CAPABILITIES: [Capability; 20] = [
    Capability {
        name: "weather",
        phrase: "the current weather in Lisbon",
        param: "city",
        value: "Lisbon",
        response: || json!({"city": "Lisbon", "temp_c": 18, "sky": "clear"}),
    },
    Capability {
        name: "geocode",
        phrase: "the coordinates of 221B Baker Street",
        param: "address",
        value: "221B Baker Street",
        response: || json!({"lat": 51.5237, "lon": -0.1585}),
    },
    Capability {
        name: "currency",
        phrase: "the EUR/USD exchange rate",
        param: "pair",
        value: "EUR/USD",
        response: || json!({"pair": "EUR/USD", "rate": 1.0842}),
    },
    Capability {
        name: "stock_quote",
        phrase: "the share price of ACME",
        param: "symbol",
        value: "ACME",
        response: || json!({"symbol": "ACME", "price": 132.4}),
    },
    Capability {
        name: "flight_status",
        phrase: "the status of flight TP1352",
        param: "flight",
        value: "TP1352",
        response: || json!({"flight": "TP1352", "state": "on_time", "gate": "B12"}),
    },
    Capability {
        name: "hotel_search",
        phrase: "a hotel in Porto",
        param: "city",
        value: "Porto",
        response: || json!({"hotel": "Ribeira Inn", "nightly_eur": 94}),
    },
    Capability {
        name: "translate",
        phrase: "the Portuguese for good morning",
        param: "text",
        value: "good morning",
        response: || json!({"translation": "bom dia", "target": "pt"}),
    },
    Capability {
        name: "news",
        phrase: "today's astronomy headline",
        param: "topic",
        value: "astronomy",
        response: || json!({"headline": "New comet visible at dusk", "source": "SkyDaily"}),
    },
    Capability {
        name: "calendar",
        phrase: "my free slots on 2026-03-14",
        param: "date",
        value: "2026-03-14",
        response: || json!({"date": "2026-03-14", "free_slots": 3}),
    },
    Capability {
        name: "recipe",
        phrase: "a gazpacho recipe",
        param: "dish",
        value: "gazpacho",
        response: || json!({"dish": "gazpacho", "minutes": 20, "servings": 4}),
    },
    Capability {
        name: "timezone",
        phrase: "the time zone of Tokyo",
        param: "city",
        value: "Tokyo",
        response: || json!({"zone": "Asia/Tokyo", "utc_offset": "+09:00"}),
    },
    Capability {
        name: "package_tracking",
        phrase: "where parcel PK-88213 is",
        param: "tracking_id",
        value: "PK-88213",
        response: || json!({"tracking_id": "PK-88213", "location": "Madrid hub"}),
    },
    Capability {
        name: "movie_info",
        phrase: "who directed Metropolis",
        param: "title",
        value: "Metropolis",
        response: || json!({"title": "Metropolis", "year": 1927, "director": "Fritz Lang"}),
    },
    Capability {
        name: "air_quality",
        phrase: "the air quality in Delhi",
        param: "city",
        value: "Delhi",
        response: || json!({"city": "Delhi", "aqi": 162, "category": "unhealthy"}),
    },
    Capability {
        name: "dictionary",
        phrase: "the part of speech of serendipity",
        param: "word",
        value: "serendipity",
        response: || json!({"word": "serendipity", "part_of_speech": "noun"}),
    },
    Capability {
        name: "nutrition",
        phrase: "the calories in a banana",
        param: "food",
        value: "banana",
        response: || json!({"food": "banana", "kcal": 89}),
    },
    Capability {
        name: "traffic",
        phrase: "the delay on the A1 from Lisbon to Porto",
        param: "route",
        value: "A1 Lisbon-Porto",
        response: || json!({"route": "A1 Lisbon-Porto", "delay_min": 12}),
    },
    Capability {
        name: "holidays",
        phrase: "the next public holiday in Portugal",
        param: "country",
        value: "PT",
        response: || json!({"country": "PT", "next_holiday": "2026-04-25"}),
    },
    Capability {
        name: "book_lookup",
        phrase: "the title of ISBN 978-0141439518",
        param: "isbn",
        value: "978-0141439518",
        response: || json!({"isbn": "978-0141439518", "title": "Pride and Prejudice"}),
    },
    Capability {
        name: "sports_scores",
        phrase: "Benfica's last result",
        param: "team",
        value: "Benfica",
        response: || json!({"team": "Benfica", "last_score": "2-1"}),
    },
];

pub const POOL_SIZE: usize = 40;

fn tools_for(cap: &Capability, with_alternative: bool) -> Vec<ToolSpec> {
    let args = json!({ cap.param: cap.value });
    let body = (cap.response)().to_string();
    let build = |name: String, description: String| {
        ToolSpec::new(&name, &description)
            .with_capability(cap.name)
            .with_param(cap.param, ParamType::String, json!(cap.value))
            .with_response(&args, &body)
    };
    let mut tools = vec![build(format!("{}_api", cap.name), format!("Look up {}.", cap.phrase))];
    if with_alternative {
        tools.push(build(format!("{}_mirror", cap.name), format!("Secondary provider: {}.", cap.phrase)));
    }
    tools
}

/// The bundled task pool. Task `i` uses `1 + i % 3` capabilities; every
/// fifth task has no alternative tools.
pub fn task_pool() -> Vec<TaskTemplate> {
    (0..POOL_SIZE)
        .map(|i| {
            let n = 1 + i % 3;
            let caps: Vec<&Capability> = (0..n).map(|j| &CAPABILITIES[(i * 7 + j * 3) % CAPABILITIES.len()]).collect();
            let with_alternative = i % 5 != 4;
            let tools = caps.iter().flat_map(|c| tools_for(c, with_alternative)).collect();
            let phrases: Vec<&str> = caps.iter().map(|c| c.phrase).collect();
            TaskTemplate {
                task_id: format!("task-{i:02}"),
                prompt: format!("Find {}.", phrases.join(", then ")),
                tools: ToolRegistry::new(tools).expect("bundled tool names are unique"),
            }
        })
        .collect()
}
