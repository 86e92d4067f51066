/// Vocabulary for synthetic samples: common words plus a few digit strings.
pub const WORDS: &[&str] = &[
    "the", "and", "open", "close", "exit", "push", "pull", "stop", "slow", "park", "cafe", "bar", "hotel", "motel",
    "taxi", "bus", "train", "metro", "gate", "door", "shop", "store", "sale", "price", "free", "new", "hot", "cold",
    "food", "pizza", "bread", "milk", "coffee", "tea", "beer", "wine", "bank", "post", "office", "city", "road",
    "street", "avenue", "north", "south", "east", "west", "left", "right", "center", "market", "garden", "house",
    "school", "church", "museum", "cinema", "music", "dance", "books", "print", "photo", "video", "radio", "phone",
    "mobile", "repair", "service", "rental", "hair", "salon", "beauty", "fashion", "shoes", "sport", "club", "gym",
    "pool", "beach", "river", "bridge", "tower", "square", "station", "airport", "parking", "welcome", "thanks",
    "hello", "world", "night", "day", "sun", "moon", "star", "2024", "365", "24h", "no1", "route66", "b52", "4x4",
    "7up", "mp3", "zone", "quick", "jazz", "king", "yard",
];
